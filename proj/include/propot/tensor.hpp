#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace propot {

// Dense row-major matrix of doubles. Everything that flows through the
// autodiff graph is 2-D; sequence batches (B, S, D) are stored flattened
// as (B*S, D) with B and S tracked by the caller.
class Tensor {
public:
    Tensor() = default;
    Tensor(int64_t rows, int64_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows * cols), fill) {
        if (rows < 0 || cols < 0) throw std::invalid_argument("Tensor: negative shape");
    }

    int64_t rows() const { return rows_; }
    int64_t cols() const { return cols_; }
    int64_t numel() const { return rows_ * cols_; }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols_ + c)]; }
    double at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols_ + c)]; }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double* row(int64_t r) { return data_.data() + r * cols_; }
    const double* row(int64_t r) const { return data_.data() + r * cols_; }

    void fill(double v) { data_.assign(data_.size(), v); }

    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const;

    // Frobenius-style helpers used by tests and diagnostics.
    double max_abs() const;
    double max_abs_diff(const Tensor& o) const;

    std::string shape_str() const {
        return "(" + std::to_string(rows_) + ", " + std::to_string(cols_) + ")";
    }

private:
    int64_t rows_ = 0;
    int64_t cols_ = 0;
    std::vector<double> data_;
};

inline void check_shape(const Tensor& t, int64_t rows, int64_t cols, const char* what) {
    if (t.rows() != rows || t.cols() != cols)
        throw std::invalid_argument(std::string(what) + ": expected (" + std::to_string(rows) +
                                    ", " + std::to_string(cols) + "), got " + t.shape_str());
}

}  // namespace propot
