#include "io_util.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace saefin::io {

void atomic_write(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for write: " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw std::runtime_error("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    std::string content((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
    return content;
}

// ---------------------------------------------------------------------------
// SHA-256 (FIPS 180-4), enough for manifest digests.
// ---------------------------------------------------------------------------

namespace {

constexpr std::array<std::uint32_t, 64> kSha256K = {
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1,
    0x923f82a4, 0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3,
    0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786,
    0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
    0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147,
    0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13,
    0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
    0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
    0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a,
    0x5b9cca4f, 0x682e6ff3, 0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208,
    0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};

inline std::uint32_t rotr(std::uint32_t x, int n) {
    return (x >> n) | (x << (32 - n));
}

struct Sha256 {
    std::uint32_t h[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                          0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
    std::uint8_t block[64];
    std::size_t block_len = 0;
    std::uint64_t total_len = 0;

    void process(const std::uint8_t* p) {
        std::uint32_t w[64];
        for (int i = 0; i < 16; ++i) {
            w[i] = (std::uint32_t(p[4 * i]) << 24) | (std::uint32_t(p[4 * i + 1]) << 16) |
                   (std::uint32_t(p[4 * i + 2]) << 8) | std::uint32_t(p[4 * i + 3]);
        }
        for (int i = 16; i < 64; ++i) {
            const std::uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
            const std::uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16] + s0 + w[i - 7] + s1;
        }
        std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3];
        std::uint32_t e = h[4], f = h[5], g = h[6], hh = h[7];
        for (int i = 0; i < 64; ++i) {
            const std::uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
            const std::uint32_t ch = (e & f) ^ (~e & g);
            const std::uint32_t t1 = hh + s1 + ch + kSha256K[i] + w[i];
            const std::uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
            const std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
            const std::uint32_t t2 = s0 + maj;
            hh = g; g = f; f = e; e = d + t1;
            d = c; c = b; b = a; a = t1 + t2;
        }
        h[0] += a; h[1] += b; h[2] += c; h[3] += d;
        h[4] += e; h[5] += f; h[6] += g; h[7] += hh;
    }

    void update(const void* data, std::size_t len) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        total_len += len;
        while (len > 0) {
            const std::size_t take = std::min(len, std::size_t(64) - block_len);
            std::memcpy(block + block_len, p, take);
            block_len += take;
            p += take;
            len -= take;
            if (block_len == 64) {
                process(block);
                block_len = 0;
            }
        }
    }

    std::string finish() {
        const std::uint64_t bit_len = total_len * 8;
        const std::uint8_t one = 0x80;
        update(&one, 1);
        const std::uint8_t zero = 0x00;
        while (block_len != 56) update(&zero, 1);
        std::uint8_t len_be[8];
        for (int i = 0; i < 8; ++i) len_be[i] = std::uint8_t(bit_len >> (56 - 8 * i));
        update(len_be, 8);
        char hex[65];
        for (int i = 0; i < 8; ++i) std::snprintf(hex + 8 * i, 9, "%08x", h[i]);
        return std::string(hex, 64);
    }
};

}  // namespace

std::string sha256_bytes(const void* data, std::size_t len) {
    Sha256 s;
    s.update(data, len);
    return s.finish();
}

std::string sha256_file(const std::filesystem::path& path) {
    const std::string content = read_file(path);
    return sha256_bytes(content.data(), content.size());
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

bool needs_quoting(const std::string& cell) {
    return cell.find_first_of(",\"\r\n") != std::string::npos;
}

std::string quote_cell(const std::string& cell) {
    if (!needs_quoting(cell)) return cell;
    std::string out = "\"";
    for (char c : cell) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

}  // namespace

CsvWriter::CsvWriter(std::vector<std::string> header) : width_(header.size()) {
    append_row(header);
}

void CsvWriter::append_row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) content_ += ',';
        content_ += quote_cell(cells[i]);
    }
    content_ += "\r\n";
}

void CsvWriter::add_row(const std::vector<std::string>& cells) {
    if (cells.size() != width_) {
        throw std::invalid_argument("csv row has " + std::to_string(cells.size()) +
                                    " cells, header has " + std::to_string(width_));
    }
    append_row(cells);
}

std::string CsvWriter::format_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

std::string CsvWriter::format_int(long long v) { return std::to_string(v); }

void CsvWriter::write(const std::filesystem::path& path) const {
    atomic_write(path, content_);
}

std::size_t CsvTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return i;
    throw std::runtime_error("csv column not found: " + name);
}

CsvTable read_csv(const std::filesystem::path& path) {
    const std::string content = read_file(path);
    CsvTable table;
    std::vector<std::string> row;
    std::string cell;
    bool in_quotes = false;
    bool row_has_data = false;
    auto flush_cell = [&]() {
        row.push_back(cell);
        cell.clear();
    };
    auto flush_row = [&]() {
        flush_cell();
        if (table.header.empty()) table.header = row;
        else table.rows.push_back(row);
        row.clear();
        row_has_data = false;
    };
    for (std::size_t i = 0; i < content.size(); ++i) {
        const char c = content[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < content.size() && content[i + 1] == '"') {
                    cell += '"';
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                cell += c;
            }
            row_has_data = true;
        } else if (c == '"') {
            in_quotes = true;
            row_has_data = true;
        } else if (c == ',') {
            flush_cell();
            row_has_data = true;
        } else if (c == '\r') {
            // handled with the following \n
        } else if (c == '\n') {
            if (row_has_data || !cell.empty() || !row.empty()) flush_row();
        } else {
            cell += c;
            row_has_data = true;
        }
    }
    if (row_has_data || !cell.empty() || !row.empty()) flush_row();
    return table;
}

// ---------------------------------------------------------------------------
// Tensor container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'F', 'T', 'C'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    out.append(bytes, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw std::runtime_error("tensor file truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

void TensorFile::add(const std::string& name, const num::Matrix& m) {
    tensors.emplace_back(name, m);
}

const num::Matrix& TensorFile::get(const std::string& name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return m;
    throw std::runtime_error("tensor not found in checkpoint: " + name);
}

bool TensorFile::has(const std::string& name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return true;
    return false;
}

void TensorFile::save(const std::filesystem::path& path) const {
    std::string out;
    out.append(kMagic, 4);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, meta_json.size());
    out += meta_json;
    put<std::uint64_t>(out, tensors.size());
    for (const auto& [name, m] : tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put<std::uint64_t>(out, m.rows());
        put<std::uint64_t>(out, m.cols());
        const std::size_t bytes = m.size() * sizeof(double);
        const std::size_t off = out.size();
        out.resize(off + bytes);
        std::memcpy(out.data() + off, m.data(), bytes);
    }
    atomic_write(path, out);
}

TensorFile TensorFile::load(const std::filesystem::path& path) {
    const std::string in = read_file(path);
    std::size_t pos = 0;
    if (in.size() < 8 || std::memcmp(in.data(), kMagic, 4) != 0)
        throw std::runtime_error("not a tensor checkpoint: " + path.string());
    pos = 4;
    const auto version = take<std::uint32_t>(in, pos);
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " +
                                 std::to_string(version) + " in " + path.string());
    TensorFile tf;
    const auto meta_len = take<std::uint64_t>(in, pos);
    if (pos + meta_len > in.size()) throw std::runtime_error("tensor file truncated");
    tf.meta_json = in.substr(pos, meta_len);
    pos += meta_len;
    const auto count = take<std::uint64_t>(in, pos);
    for (std::uint64_t t = 0; t < count; ++t) {
        const auto name_len = take<std::uint32_t>(in, pos);
        if (pos + name_len > in.size()) throw std::runtime_error("tensor file truncated");
        std::string name = in.substr(pos, name_len);
        pos += name_len;
        const auto rows = take<std::uint64_t>(in, pos);
        const auto cols = take<std::uint64_t>(in, pos);
        const std::size_t bytes = rows * cols * sizeof(double);
        if (pos + bytes > in.size()) throw std::runtime_error("tensor file truncated");
        num::Matrix m(rows, cols);
        std::memcpy(m.data(), in.data() + pos, bytes);
        pos += bytes;
        tf.tensors.emplace_back(std::move(name), std::move(m));
    }
    return tf;
}

}  // namespace saefin::io
