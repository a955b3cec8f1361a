#pragma once

#include <cassert>
#include <cstdint>
#include <new>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fusenet/errors.hpp"

namespace fusenet {

namespace detail {

/// Minimal over-aligning allocator so numeric buffers always start on the
/// same cache-line boundary. SIMD kernels then take identical code paths for
/// identical shapes no matter where the heap placed a tensor, which keeps
/// results bit-reproducible.
template <typename T, std::size_t Align>
struct AlignedAlloc {
    using value_type = T;

    AlignedAlloc() noexcept = default;
    template <typename U>
    AlignedAlloc(const AlignedAlloc<U, Align>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Align}));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{Align}); }

    template <typename U>
    struct rebind {
        using other = AlignedAlloc<U, Align>;
    };
    friend bool operator==(const AlignedAlloc&, const AlignedAlloc&) noexcept { return true; }
};

}  // namespace detail

/// 64-byte-aligned double vector backing all tensor storage.
using dvec = std::vector<double, detail::AlignedAlloc<double, 64>>;

/// Dense n-dimensional array of doubles in row-major order, with an optional
/// gradient buffer of identical shape. The one value type that flows through
/// computation graphs.
struct Tensor {
    std::vector<int> shape;
    dvec data;
    dvec grad;  // empty when absent, else data.size()

    Tensor() = default;

    explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
        validate_shape();
        data.assign(static_cast<std::size_t>(numel_of(shape)), fill);
    }

    Tensor(std::vector<int> s, std::initializer_list<double> values) : shape(std::move(s)), data(values) {
        validate_shape();
        if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
            throw shape_error("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str());
    }

    Tensor(std::vector<int> s, const std::vector<double>& values)
        : shape(std::move(s)), data(values.begin(), values.end()) {
        validate_shape();
        if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
            throw shape_error("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str());
    }

    Tensor(std::vector<int> s, const dvec& values)
        : shape(std::move(s)), data(values.begin(), values.end()) {
        validate_shape();
        if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
            throw shape_error("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str());
    }

    static Tensor scalar(double v) { return Tensor({1}, std::initializer_list<double>{v}); }

    static std::int64_t numel_of(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) n *= d;
        return s.empty() ? 0 : n;
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    double& at(int i, int j) {
        assert(rank() == 2);
        return data[static_cast<std::size_t>(i) * shape[1] + j];
    }
    double at(int i, int j) const {
        assert(rank() == 2);
        return data[static_cast<std::size_t>(i) * shape[1] + j];
    }
    double& at(int i, int j, int k) {
        assert(rank() == 3);
        return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double at(int i, int j, int k) const {
        assert(rank() == 3);
        return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
    }

    bool has_grad() const { return !grad.empty(); }

    /// Allocate (zeroed) gradient buffer if absent.
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? " x " : "") << shape[i];
        os << "]";
        return os.str();
    }

private:
    void validate_shape() const {
        if (shape.empty()) throw shape_error("tensor must have at least one dimension");
        for (int d : shape)
            if (d <= 0) throw shape_error("tensor dimensions must be positive, got " + shape_str());
    }
};

inline void require_rank(const Tensor& t, int r, const char* what) {
    if (t.rank() != r)
        throw shape_error(std::string(what) + ": expected rank " + std::to_string(r) + " tensor, got " +
                          t.shape_str());
}

}  // namespace fusenet
