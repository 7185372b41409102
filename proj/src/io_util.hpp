// File plumbing shared by checkpoints, table exports, and run manifests.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "numerics.hpp"

namespace saefin::io {

// Writes content to `path` atomically (temp file + rename).
void atomic_write(const std::filesystem::path& path, const std::string& content);

std::string read_file(const std::filesystem::path& path);

// Hex-encoded SHA-256 of a file's bytes; used for manifest input digests.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(const void* data, std::size_t len);

// RFC-4180 CSV: CRLF row endings, header required, quoting only when needed.
// Numbers are formatted with %.12g so reruns are byte-identical.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header);

    void add_row(const std::vector<std::string>& cells);
    static std::string format_number(double v);
    static std::string format_int(long long v);

    const std::string& content() const { return content_; }
    void write(const std::filesystem::path& path) const;

private:
    std::size_t width_;
    std::string content_;
    void append_row(const std::vector<std::string>& cells);
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const;  // throws if absent
};

CsvTable read_csv(const std::filesystem::path& path);

// Named tensor checkpoint container: a little-endian binary file with a JSON
// metadata header followed by named double matrices. Version-checked on load.
struct TensorFile {
    std::string meta_json;
    std::vector<std::pair<std::string, num::Matrix>> tensors;

    void add(const std::string& name, const num::Matrix& m);
    const num::Matrix& get(const std::string& name) const;  // throws if absent
    bool has(const std::string& name) const;

    void save(const std::filesystem::path& path) const;
    static TensorFile load(const std::filesystem::path& path);
};

}  // namespace saefin::io
