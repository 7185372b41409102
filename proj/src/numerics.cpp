#include "numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace saefin::num {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> entries)
    : rows_(rows), cols_(cols), data_(std::move(entries)) {
    if (data_.size() != rows_ * cols_) {
        throw std::invalid_argument("Matrix: " + std::to_string(data_.size()) +
                                    " entries for shape " + shape_str());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

std::string Matrix::shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

bool Matrix::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: shape mismatch " + a.shape_str() +
                                    " * " + b.shape_str());
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    // i-k-j order keeps the inner loop contiguous in both b and out.
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a.data() + i * k;
        double* orow = out.data() + i * m;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b.data() + kk * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out.at(j, i) = m.at(i, j);
    return out;
}

static void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    a.shape_str() + " vs " + b.shape_str());
    }
}

Matrix add(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "add");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "sub");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Matrix scale(const Matrix& m, double s) {
    Matrix out = m;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    return out;
}

double dot(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double frobenius_norm(const Matrix& m) { return std::sqrt(dot(m, m)); }

double max_abs_diff(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "max_abs_diff");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

// ---------------------------------------------------------------------------
// Philox4x32-10
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline std::uint32_t mulhi32(std::uint32_t a, std::uint32_t b) {
    return static_cast<std::uint32_t>((static_cast<std::uint64_t>(a) * b) >> 32);
}

void philox4x32_10(const std::uint32_t key_in[2], const std::uint32_t ctr_in[4],
                   std::uint32_t out[4]) {
    std::uint32_t k0 = key_in[0], k1 = key_in[1];
    std::uint32_t c0 = ctr_in[0], c1 = ctr_in[1], c2 = ctr_in[2], c3 = ctr_in[3];
    for (int round = 0; round < 10; ++round) {
        const std::uint32_t hi0 = mulhi32(kPhiloxM0, c0);
        const std::uint32_t lo0 = kPhiloxM0 * c0;
        const std::uint32_t hi1 = mulhi32(kPhiloxM1, c2);
        const std::uint32_t lo1 = kPhiloxM1 * c2;
        const std::uint32_t n0 = hi1 ^ c1 ^ k0;
        const std::uint32_t n1 = lo1;
        const std::uint32_t n2 = hi0 ^ c3 ^ k1;
        const std::uint32_t n3 = lo0;
        c0 = n0; c1 = n1; c2 = n2; c3 = n3;
        k0 += kPhiloxW0;
        k1 += kPhiloxW1;
    }
    out[0] = c0; out[1] = c1; out[2] = c2; out[3] = c3;
}

// SplitMix64 finalizer; used only to derive sub-stream ids from labels.
std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t hash_label(std::string_view label) {
    // FNV-1a 64, then mixed.
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : label) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return mix64(h);
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream) {}

RngStream RngStream::split(std::string_view label) const {
    return RngStream(seed_, mix64(stream_ ^ hash_label(label)));
}

RngStream RngStream::split(std::uint64_t index) const {
    return RngStream(seed_, mix64(stream_ ^ mix64(index + 0x51ED2701ull)));
}

void RngStream::refill() {
    const std::uint32_t key[2] = {static_cast<std::uint32_t>(seed_),
                                  static_cast<std::uint32_t>(seed_ >> 32)};
    const std::uint32_t ctr[4] = {static_cast<std::uint32_t>(counter_),
                                  static_cast<std::uint32_t>(counter_ >> 32),
                                  static_cast<std::uint32_t>(stream_),
                                  static_cast<std::uint32_t>(stream_ >> 32)};
    philox4x32_10(key, ctr, buffer_);
    ++counter_;
    buffer_pos_ = 0;
}

std::uint32_t RngStream::next_u32() {
    if (buffer_pos_ >= 4) refill();
    return buffer_[buffer_pos_++];
}

std::uint64_t RngStream::next_u64() {
    const std::uint64_t hi = next_u32();
    const std::uint64_t lo = next_u32();
    return (hi << 32) | lo;
}

double RngStream::uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform01();
}

double RngStream::normal() {
    if (has_spare_normal_) {
        has_spare_normal_ = false;
        return spare_normal_;
    }
    const double u1 = 1.0 - uniform01();  // (0, 1]
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_normal_ = radius * std::sin(angle);
    has_spare_normal_ = true;
    return radius * std::cos(angle);
}

double RngStream::normal(double mu, double sigma) { return mu + sigma * normal(); }

std::uint64_t RngStream::next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("next_below: n must be positive");
    const std::uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
    for (;;) {
        const std::uint64_t r = next_u64();
        if (r >= threshold) return r % n;
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamState AdamState::for_param(const Matrix& param, double beta1, double beta2,
                               double epsilon) {
    AdamState s;
    s.first_moment = Matrix(param.rows(), param.cols());
    s.second_moment = Matrix(param.rows(), param.cols());
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.epsilon = epsilon;
    return s;
}

void adam_step(Matrix& params, const Matrix& grads, AdamState& state, double lr) {
    if (!params.same_shape(grads)) {
        throw std::invalid_argument("adam_step: param shape " + params.shape_str() +
                                    " vs grad shape " + grads.shape_str());
    }
    if (!params.same_shape(state.first_moment)) {
        throw std::invalid_argument("adam_step: state shape " +
                                    state.first_moment.shape_str() +
                                    " does not track param shape " + params.shape_str());
    }
    if (lr <= 0.0) throw std::invalid_argument("adam_step: lr must be positive");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(grads[i])) {
            throw std::invalid_argument("adam_step: non-finite gradient at index " +
                                        std::to_string(i));
        }
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = state.beta1 * m + (1.0 - state.beta1) * grads[i];
        v = state.beta2 * v + (1.0 - state.beta2) * grads[i] * grads[i];
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

void symmetric_eigen(const Matrix& sym, Matrix& eigenvectors,
                     std::vector<double>& eigenvalues) {
    if (sym.rows() != sym.cols()) {
        throw std::invalid_argument("symmetric_eigen: matrix is " + sym.shape_str());
    }
    const std::size_t n = sym.rows();
    Matrix a = sym;
    Matrix v = Matrix::identity(n);

    // Cyclic Jacobi sweeps; n stays small (<= a few hundred) in this project.
    const int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (off < 1e-24 * std::max(1.0, frobenius_norm(sym))) break;

        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double app = a.at(p, p);
                const double aqq = a.at(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0)
                                     ? 1.0 / (theta + std::sqrt(1.0 + theta * theta))
                                     : 1.0 / (theta - std::sqrt(1.0 + theta * theta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a.at(i, p);
                    const double aiq = a.at(i, q);
                    a.at(i, p) = c * aip - s * aiq;
                    a.at(i, q) = s * aip + c * aiq;
                }
                for (std::size_t j = 0; j < n; ++j) {
                    const double apj = a.at(p, j);
                    const double aqj = a.at(q, j);
                    a.at(p, j) = c * apj - s * aqj;
                    a.at(q, j) = s * apj + c * aqj;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = v.at(i, p);
                    const double viq = v.at(i, q);
                    v.at(i, p) = c * vip - s * viq;
                    v.at(i, q) = s * vip + c * viq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        if (a.at(x, x) != a.at(y, y)) return a.at(x, x) > a.at(y, y);
        return x < y;
    });

    eigenvalues.assign(n, 0.0);
    eigenvectors = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        eigenvalues[j] = a.at(order[j], order[j]);
        for (std::size_t i = 0; i < n; ++i)
            eigenvectors.at(i, j) = v.at(i, order[j]);
    }
}

PcaResult pca(const Matrix& data, std::size_t num_components) {
    const std::size_t n = data.rows(), d = data.cols();
    if (n < 2) throw std::invalid_argument("pca: need at least 2 rows, got " +
                                           std::to_string(n));
    if (num_components > std::min(n, d)) {
        throw std::invalid_argument("pca: " + std::to_string(num_components) +
                                    " components exceed min(n,d) = " +
                                    std::to_string(std::min(n, d)));
    }

    PcaResult result;
    result.column_means.assign(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += data.at(i, j);
        result.column_means[j] = mean / static_cast<double>(n);
    }
    Matrix centered(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            centered.at(i, j) = data.at(i, j) - result.column_means[j];

    Matrix cov(d, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = centered.data() + i * d;
        for (std::size_t a = 0; a < d; ++a) {
            if (row[a] == 0.0) continue;
            double* crow = cov.data() + a * d;
            for (std::size_t b = 0; b < d; ++b) crow[b] += row[a] * row[b];
        }
    }
    const double denom = static_cast<double>(n - 1);
    for (std::size_t i = 0; i < cov.size(); ++i) cov[i] /= denom;

    Matrix vecs;
    std::vector<double> vals;
    symmetric_eigen(cov, vecs, vals);

    result.components = Matrix(d, num_components);
    result.explained_variance.assign(num_components, 0.0);
    for (std::size_t j = 0; j < num_components; ++j) {
        result.explained_variance[j] = std::max(0.0, vals[j]);
        // Sign convention: the largest-magnitude entry is positive.
        std::size_t arg = 0;
        double best = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            if (std::abs(vecs.at(i, j)) > best) {
                best = std::abs(vecs.at(i, j));
                arg = i;
            }
        }
        const double sign = vecs.at(arg, j) < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < d; ++i)
            result.components.at(i, j) = sign * vecs.at(i, j);
    }
    result.scores = matmul(centered, result.components);
    return result;
}

}  // namespace saefin::num
