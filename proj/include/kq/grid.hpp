#pragma once

#include <array>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "kq/error.hpp"

namespace kq {

/// Uniform grid on [lo, hi] with `intervals` cells, i.e. intervals + 1 nodes.
struct UniformGrid {
    double lo = 0.0;
    double hi = 1.0;
    std::size_t intervals = 1;

    UniformGrid() = default;
    UniformGrid(double lo_, double hi_, std::size_t intervals_)
        : lo(lo_), hi(hi_), intervals(intervals_) {
        if (!(hi > lo) || intervals == 0) {
            throw Error(ErrorCode::GridMismatch, "UniformGrid needs hi > lo and at least one interval");
        }
    }

    std::size_t size() const { return intervals + 1; }
    double step() const { return (hi - lo) / static_cast<double>(intervals); }
    double node(std::size_t i) const {
        // exact endpoints regardless of rounding in step()
        if (i == intervals) return hi;
        return lo + static_cast<double>(i) * step();
    }
    std::vector<double> nodes() const {
        std::vector<double> out(size());
        for (std::size_t i = 0; i < size(); ++i) out[i] = node(i);
        return out;
    }

    friend bool operator==(const UniformGrid& a, const UniformGrid& b) {
        return a.lo == b.lo && a.hi == b.hi && a.intervals == b.intervals;
    }
};

/// Tensor product of uniform axes with row-major (last axis fastest) storage.
class ProductGrid {
public:
    static constexpr std::size_t kMaxDims = 4;
    using Index = std::array<std::ptrdiff_t, kMaxDims>;

    ProductGrid() = default;
    explicit ProductGrid(std::vector<UniformGrid> axes) : axes_(std::move(axes)) {
        if (axes_.empty() || axes_.size() > kMaxDims) {
            throw Error(ErrorCode::GridMismatch, "ProductGrid supports 1 to 4 axes");
        }
        strides_.assign(axes_.size(), 1);
        for (std::size_t d = axes_.size(); d-- > 1;) {
            strides_[d - 1] = strides_[d] * axes_[d].size();
        }
        size_ = strides_[0] * axes_[0].size();
    }

    std::size_t dims() const { return axes_.size(); }
    std::size_t size() const { return size_; }
    const UniformGrid& axis(std::size_t d) const { return axes_[d]; }
    const std::vector<UniformGrid>& axes() const { return axes_; }
    std::size_t stride(std::size_t d) const { return strides_[d]; }

    Index unravel(std::size_t flat) const {
        Index idx{};
        for (std::size_t d = 0; d < dims(); ++d) {
            idx[d] = static_cast<std::ptrdiff_t>(flat / strides_[d]);
            flat %= strides_[d];
        }
        return idx;
    }

    std::size_t ravel(const Index& idx) const {
        std::size_t flat = 0;
        for (std::size_t d = 0; d < dims(); ++d) flat += static_cast<std::size_t>(idx[d]) * strides_[d];
        return flat;
    }

    bool contains(const Index& idx) const {
        for (std::size_t d = 0; d < dims(); ++d) {
            if (idx[d] < 0 || idx[d] >= static_cast<std::ptrdiff_t>(axes_[d].size())) return false;
        }
        return true;
    }

    double coord(std::size_t flat, std::size_t d) const {
        return axes_[d].node(static_cast<std::size_t>(unravel(flat)[d]));
    }

    friend bool operator==(const ProductGrid& a, const ProductGrid& b) { return a.axes_ == b.axes_; }

private:
    std::vector<UniformGrid> axes_;
    std::vector<std::size_t> strides_;
    std::size_t size_ = 0;
};

}  // namespace kq
