#ifndef CHANPRUNE_TENSOR_HPP_
#define CHANPRUNE_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace chanprune {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
	return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// float for training runs, double for checks; long double only for finite-difference oracles.
template <typename T>
concept Scalar = std::is_same_v<T, float> || std::is_same_v<T, double> || std::is_same_v<T, long double>;

/**
 * Dense row-major array. The element type doubles as the dtype: `Tensor<float>`
 * is used for training runs and `Tensor<double>` for gradient checks and
 * equivalence tests.
 *
 * The flat buffer always holds exactly `shape_volume(shape())` elements and
 * every extent is positive.
 */
/// Accumulator type for reductions that feed normalization statistics.
template <Scalar T>
using Accum = std::conditional_t<std::is_same_v<T, long double>, long double, double>;

template <Scalar T>
class Tensor {
public:
	using value_type = T;

	Tensor() = default;

	explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
		check_extents();
		data_.assign(shape_volume(shape_), fill);
	}

	Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
		check_extents();
		if (data_.size() != shape_volume(shape_))
			throw DimensionError("tensor data length " + std::to_string(data_.size()) +
					" does not match shape " + detail::shape_str(shape_));
	}

	Tensor(Shape shape, std::initializer_list<T> values)
			: Tensor(std::move(shape), std::vector<T>(values)) {}

	const Shape& shape() const noexcept { return shape_; }
	std::size_t rank() const noexcept { return shape_.size(); }
	std::size_t dim(std::size_t axis) const {
		if (axis >= shape_.size())
			throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
					detail::shape_str(shape_));
		return shape_[axis];
	}
	std::size_t size() const noexcept { return data_.size(); }
	bool empty() const noexcept { return data_.empty(); }

	std::span<T> data() noexcept { return data_; }
	std::span<const T> data() const noexcept { return data_; }
	const std::vector<T>& values() const noexcept { return data_; }

	T& operator[](std::size_t i) { return data_[i]; }
	const T& operator[](std::size_t i) const { return data_[i]; }

	/// Element access for rank-2 and rank-4 tensors.
	T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
	const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
	T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
		return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
	}
	const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
		return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
	}

	void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

	Tensor reshaped(Shape shape) const {
		return Tensor(std::move(shape), data_);
	}

	template <Scalar U>
	Tensor<U> cast() const {
		std::vector<U> out(data_.size());
		std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
		return Tensor<U>(shape_, std::move(out));
	}

	/// Rows [begin, end) along the leading axis.
	Tensor slice_rows(std::size_t begin, std::size_t end) const {
		if (rank() == 0 || begin > end || end > shape_[0])
			throw DimensionError("row slice out of range for shape " + detail::shape_str(shape_));
		const std::size_t stride = data_.size() / shape_[0];
		Shape s = shape_;
		s[0] = end - begin;
		return Tensor(std::move(s), std::vector<T>(data_.begin() + begin * stride, data_.begin() + end * stride));
	}

	bool operator==(const Tensor& other) const = default;

private:
	void check_extents() const {
		for (auto e : shape_)
			if (e == 0) throw DimensionError("tensor extents must be positive, got " + detail::shape_str(shape_));
	}

	Shape shape_;
	std::vector<T> data_;
};

/// Number of elements per leading-axis row.
template <Scalar T>
std::size_t row_stride(const Tensor<T>& t) {
	return t.size() / t.dim(0);
}

// ---------------------------------------------------------------------------
// Elementwise maps
// ---------------------------------------------------------------------------

template <Scalar T, typename F>
Tensor<T> map(const Tensor<T>& t, F&& f) {
	Tensor<T> out(t.shape());
	for (std::size_t i = 0; i < t.size(); ++i) out[i] = f(t[i]);
	return out;
}

template <Scalar T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F&& f) {
	if (a.shape() != b.shape())
		throw DimensionError("elementwise operands differ in shape: " + detail::shape_str(a.shape()) +
				" vs " + detail::shape_str(b.shape()));
	Tensor<T> out(a.shape());
	for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
	return out;
}

template <Scalar T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
	return zip(a, b, [](T x, T y) { return x + y; });
}

template <Scalar T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
	return zip(a, b, [](T x, T y) { return x * y; });
}

template <Scalar T>
Tensor<T> abs(const Tensor<T>& t) {
	return map(t, [](T x) { return std::abs(x); });
}

template <Scalar T>
Tensor<T> square(const Tensor<T>& t) {
	return map(t, [](T x) { return x * x; });
}

template <Scalar T>
Tensor<T> scale(const Tensor<T>& t, T factor) {
	return map(t, [factor](T x) { return x * factor; });
}

template <Scalar T>
Tensor<T> add_scalar(const Tensor<T>& t, T value) {
	return map(t, [value](T x) { return x + value; });
}

template <Scalar T>
Tensor<T> relu(const Tensor<T>& t) {
	return map(t, [](T x) { return x > T(0) ? x : T(0); });
}

/// 1 where `t` is strictly positive, 0 elsewhere (the ReLU derivative).
template <Scalar T>
Tensor<T> relu_mask(const Tensor<T>& t) {
	return map(t, [](T x) { return x > T(0) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class ReduceKind { Sum, Mean, Max };

/**
 * Reduces over `axes`, removing them from the shape. Reducing every axis yields
 * shape {1}. Each output element is accumulated in ascending flat-index order
 * of the input, so repeated calls are bitwise reproducible.
 */
template <Scalar T>
Tensor<T> reduce(const Tensor<T>& t, const std::vector<std::size_t>& axes, ReduceKind kind) {
	std::vector<bool> reduced(t.rank(), false);
	for (auto a : axes) {
		if (a >= t.rank())
			throw DimensionError("reduce axis " + std::to_string(a) + " invalid for shape " +
					detail::shape_str(t.shape()));
		reduced[a] = true;
	}
	Shape out_shape;
	for (std::size_t i = 0; i < t.rank(); ++i)
		if (!reduced[i]) out_shape.push_back(t.dim(i));
	if (out_shape.empty()) out_shape.push_back(1);

	// Output stride of each input axis (0 for reduced axes).
	std::vector<std::size_t> out_stride(t.rank(), 0);
	{
		std::size_t s = 1;
		for (std::size_t i = t.rank(); i-- > 0;) {
			if (!reduced[i]) {
				out_stride[i] = s;
				s *= t.dim(i);
			}
		}
	}

	const T init = kind == ReduceKind::Max ? -std::numeric_limits<T>::infinity() : T(0);
	Tensor<T> out(out_shape, init);
	std::vector<std::size_t> idx(t.rank(), 0);
	for (std::size_t flat = 0; flat < t.size(); ++flat) {
		std::size_t o = 0;
		for (std::size_t i = 0; i < t.rank(); ++i) o += idx[i] * out_stride[i];
		if (kind == ReduceKind::Max)
			out[o] = std::max(out[o], t[flat]);
		else
			out[o] += t[flat];
		for (std::size_t i = t.rank(); i-- > 0;) {
			if (++idx[i] < t.dim(i)) break;
			idx[i] = 0;
		}
	}
	if (kind == ReduceKind::Mean) {
		const T count = static_cast<T>(t.size() / out.size());
		for (auto& v : out.data()) v /= count;
	}
	return out;
}

// ---------------------------------------------------------------------------
// Matrix product
// ---------------------------------------------------------------------------

/// C = A·B. Each C[i,j] is summed over k in ascending order.
template <Scalar T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
	if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
		throw DimensionError("matmul shape mismatch: " + detail::shape_str(a.shape()) + " x " +
				detail::shape_str(b.shape()));
	const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
	Tensor<T> c({m, n});
	const T* pa = a.data().data();
	const T* pb = b.data().data();
	T* pc = c.data().data();
	for (std::size_t i = 0; i < m; ++i) {
		T* crow = pc + i * n;
		for (std::size_t p = 0; p < k; ++p) {
			const T av = pa[i * k + p];
			const T* brow = pb + p * n;
			for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
		}
	}
	return c;
}

template <Scalar T>
Tensor<T> transpose(const Tensor<T>& a) {
	if (a.rank() != 2) throw DimensionError("transpose needs a matrix, got " + detail::shape_str(a.shape()));
	Tensor<T> out({a.dim(1), a.dim(0)});
	for (std::size_t i = 0; i < a.dim(0); ++i)
		for (std::size_t j = 0; j < a.dim(1); ++j) out.at(j, i) = a.at(i, j);
	return out;
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation, zero padding)
// ---------------------------------------------------------------------------

struct Conv2dParams {
	std::size_t stride = 1;
	std::size_t padding = 0;
};

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, Conv2dParams p) {
	if (p.stride == 0) throw ShapeError("convolution stride must be positive");
	const std::size_t padded = in + 2 * p.padding;
	if (padded < kernel || (padded - kernel) % p.stride != 0)
		throw ShapeError("convolution output extent (" + std::to_string(in) + "+2*" +
				std::to_string(p.padding) + "-" + std::to_string(kernel) + ")/" + std::to_string(p.stride) +
				"+1 is not a positive integer");
	return (padded - kernel) / p.stride + 1;
}

namespace detail {

template <Scalar T>
void check_conv_operands(const Tensor<T>& input, const Tensor<T>& weight) {
	if (input.rank() != 4 || weight.rank() != 4)
		throw DimensionError("conv2d expects NCHW input and FCkk weight, got " + shape_str(input.shape()) +
				" and " + shape_str(weight.shape()));
	if (input.dim(1) != weight.dim(1))
		throw DimensionError("conv2d channel mismatch: input " + shape_str(input.shape()) + " vs weight " +
				shape_str(weight.shape()));
}

// Output index range [lo, hi) whose input coordinate o*stride + k - pad falls inside [0, in).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t k,
		Conv2dParams p) {
	std::size_t lo = 0;
	if (k < p.padding) lo = (p.padding - k + p.stride - 1) / p.stride;
	std::size_t hi = 0;
	// largest o with o*stride + k - pad <= in - 1
	if (in + p.padding >= k + 1) hi = std::min(out, (in + p.padding - k - 1) / p.stride + 1);
	return {lo, std::max(lo, hi)};
}

}  // namespace detail

/**
 * Direct convolution. Each output element accumulates (c, kh, kw) in ascending
 * order starting from zero; out-of-range taps are skipped, which equals adding
 * zero padding.
 */
template <Scalar T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, Conv2dParams p) {
	detail::check_conv_operands(input, weight);
	const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
	const std::size_t F = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
	const std::size_t OH = conv_output_extent(H, KH, p), OW = conv_output_extent(W, KW, p);
	Tensor<T> out({N, F, OH, OW});
	const T* in = input.data().data();
	const T* wt = weight.data().data();
	T* po = out.data().data();
	for (std::size_t n = 0; n < N; ++n) {
		for (std::size_t f = 0; f < F; ++f) {
			T* plane = po + (n * F + f) * OH * OW;
			for (std::size_t c = 0; c < C; ++c) {
				const T* src = in + (n * C + c) * H * W;
				for (std::size_t kh = 0; kh < KH; ++kh) {
					auto [oh_lo, oh_hi] = detail::valid_range(OH, H, kh, p);
					for (std::size_t kw = 0; kw < KW; ++kw) {
						const T w = wt[((f * C + c) * KH + kh) * KW + kw];
						auto [ow_lo, ow_hi] = detail::valid_range(OW, W, kw, p);
						for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
							const T* row = src + (oh * p.stride + kh - p.padding) * W;
							T* orow = plane + oh * OW;
							for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
								orow[ow] += w * row[ow * p.stride + kw - p.padding];
						}
					}
				}
			}
		}
	}
	return out;
}

/// Unfolds one example into a (C·kH·kW) × (OH·OW) column matrix.
template <Scalar T>
Tensor<T> im2col(const Tensor<T>& input, std::size_t n, std::size_t KH, std::size_t KW, Conv2dParams p) {
	const std::size_t C = input.dim(1), H = input.dim(2), W = input.dim(3);
	const std::size_t OH = conv_output_extent(H, KH, p), OW = conv_output_extent(W, KW, p);
	Tensor<T> cols({C * KH * KW, OH * OW});
	for (std::size_t c = 0; c < C; ++c)
		for (std::size_t kh = 0; kh < KH; ++kh)
			for (std::size_t kw = 0; kw < KW; ++kw) {
				const std::size_t row = (c * KH + kh) * KW + kw;
				for (std::size_t oh = 0; oh < OH; ++oh)
					for (std::size_t ow = 0; ow < OW; ++ow) {
						const auto ih = static_cast<std::ptrdiff_t>(oh * p.stride + kh) -
								static_cast<std::ptrdiff_t>(p.padding);
						const auto iw = static_cast<std::ptrdiff_t>(ow * p.stride + kw) -
								static_cast<std::ptrdiff_t>(p.padding);
						if (ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(H) &&
								iw < static_cast<std::ptrdiff_t>(W))
							cols.at(row, oh * OW + ow) = input.at(n, c, static_cast<std::size_t>(ih),
									static_cast<std::size_t>(iw));
					}
			}
	return cols;
}

/// im2col + matmul route; agrees with `conv2d` and serves as its cross-check.
template <Scalar T>
Tensor<T> conv2d_im2col(const Tensor<T>& input, const Tensor<T>& weight, Conv2dParams p) {
	detail::check_conv_operands(input, weight);
	const std::size_t N = input.dim(0), H = input.dim(2), W = input.dim(3);
	const std::size_t F = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
	const std::size_t OH = conv_output_extent(H, KH, p), OW = conv_output_extent(W, KW, p);
	const Tensor<T> wmat = weight.reshaped({F, weight.size() / F});
	Tensor<T> out({N, F, OH, OW});
	for (std::size_t n = 0; n < N; ++n) {
		const Tensor<T> prod = matmul(wmat, im2col(input, n, KH, KW, p));
		std::copy(prod.data().begin(), prod.data().end(), out.data().begin() + n * F * OH * OW);
	}
	return out;
}

template <Scalar T>
struct Conv2dGrads {
	Tensor<T> grad_input;
	Tensor<T> grad_weight;
};

/// Adjoints of `conv2d` with respect to its input and its weight.
template <Scalar T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& grad_output,
		Conv2dParams p) {
	detail::check_conv_operands(input, weight);
	const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
	const std::size_t F = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
	const std::size_t OH = conv_output_extent(H, KH, p), OW = conv_output_extent(W, KW, p);
	const Shape expected{N, F, OH, OW};
	if (grad_output.shape() != expected)
		throw DimensionError("conv2d_backward: grad_output " + detail::shape_str(grad_output.shape()) +
				" does not match forward output " + detail::shape_str(expected));

	Conv2dGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(weight.shape())};
	const T* in = input.data().data();
	const T* wt = weight.data().data();
	const T* go = grad_output.data().data();
	T* gi = g.grad_input.data().data();
	T* gw = g.grad_weight.data().data();
	for (std::size_t n = 0; n < N; ++n) {
		for (std::size_t f = 0; f < F; ++f) {
			const T* gplane = go + (n * F + f) * OH * OW;
			for (std::size_t c = 0; c < C; ++c) {
				const T* src = in + (n * C + c) * H * W;
				T* dst = gi + (n * C + c) * H * W;
				for (std::size_t kh = 0; kh < KH; ++kh) {
					auto [oh_lo, oh_hi] = detail::valid_range(OH, H, kh, p);
					for (std::size_t kw = 0; kw < KW; ++kw) {
						const std::size_t widx = ((f * C + c) * KH + kh) * KW + kw;
						const T w = wt[widx];
						auto [ow_lo, ow_hi] = detail::valid_range(OW, W, kw, p);
						T acc = T(0);
						for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
							const std::size_t ioff = (oh * p.stride + kh - p.padding) * W;
							const T* grow = gplane + oh * OW;
							for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
								const std::size_t iw = ow * p.stride + kw - p.padding;
								acc += grow[ow] * src[ioff + iw];
								dst[ioff + iw] += w * grow[ow];
							}
						}
						gw[widx] += acc;
					}
				}
			}
		}
	}
	return g;
}

}  // namespace chanprune

#endif  // CHANPRUNE_TENSOR_HPP_
