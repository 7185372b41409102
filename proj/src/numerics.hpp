// Dense linear algebra, counter-based RNG, Adam, and PCA shared by every
// other component. Everything here is deterministic: same inputs and seeds
// produce the same bits on every run.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace saefin::num {

// Row-major dense matrix of doubles. Vectors are 1xN or Nx1 matrices.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> entries);

    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    const std::vector<double>& entries() const { return data_; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    std::string shape_str() const;

    bool all_finite() const;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& m, double s);
double dot(const Matrix& a, const Matrix& b);        // flattened inner product
double frobenius_norm(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

// Philox4x32-10 counter-based generator (Salmon, Moraes, Dror, Shaw 2011).
// A draw is a pure function of (seed, stream, counter), so sub-streams can be
// handed to parallel workers and the overall experiment stays bit-reproducible
// regardless of scheduling. Streams are derived by name via split().
class RngStream {
public:
    explicit RngStream(std::uint64_t seed, std::uint64_t stream = 0);

    // Child stream keyed by a label; independent of draws made on the parent.
    RngStream split(std::string_view label) const;
    RngStream split(std::uint64_t index) const;

    std::uint32_t next_u32();
    std::uint64_t next_u64();
    // Uniform in [0, 1) with 53 random mantissa bits.
    double uniform01();
    double uniform(double lo, double hi);
    // Standard normal via Box-Muller (pair generated, spare cached).
    double normal();
    double normal(double mu, double sigma);
    // Uniform integer in [0, n), unbiased via rejection.
    std::uint64_t next_below(std::uint64_t n);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t counter_ = 0;
    std::uint32_t buffer_[4] = {0, 0, 0, 0};
    int buffer_pos_ = 4;   // empty
    bool has_spare_normal_ = false;
    double spare_normal_ = 0.0;

    void refill();
};

// Adam with bias correction. Accumulators always match the tracked parameter.
struct AdamState {
    std::uint64_t step = 0;
    Matrix first_moment;
    Matrix second_moment;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState for_param(const Matrix& param, double beta1 = 0.9,
                               double beta2 = 0.999, double epsilon = 1e-8);
};

// In-place Adam update. Rejects non-finite gradients, naming the first bad index.
void adam_step(Matrix& params, const Matrix& grads, AdamState& state, double lr);

struct PcaResult {
    Matrix components;                      // d x P, orthonormal columns
    Matrix scores;                          // n x P, centered_data * components
    std::vector<double> explained_variance; // non-increasing
    std::vector<double> column_means;       // the centering that was applied
};

// PCA via Jacobi eigendecomposition of the d x d covariance (columns centered
// internally). Sign convention: the largest-magnitude entry of each component
// is positive, so results do not depend on eigensolver quirks.
PcaResult pca(const Matrix& data, std::size_t num_components);

// Eigendecomposition of a symmetric matrix; eigenvalues sorted descending.
// Used by pca() and exposed for tests.
void symmetric_eigen(const Matrix& sym, Matrix& eigenvectors, std::vector<double>& eigenvalues);

}  // namespace saefin::num
