#ifndef CHANPRUNE_ENGINE_HPP_
#define CHANPRUNE_ENGINE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "errors.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace chanprune {

enum class Mode { Train, Eval };

/**
 * Everything a backward pass needs from the forward pass: every node output,
 * BatchNorm normalized inputs and inverse std devs, and max-pool argmax
 * indices. Site pre-activations are the outputs of the site nodes (masked
 * channels already zeroed).
 */
template <Scalar T>
struct ForwardRecord {
	Mode mode = Mode::Eval;
	Tensor<T> input;
	std::vector<Tensor<T>> outputs;
	std::vector<Tensor<T>> normalized;
	std::vector<std::vector<Accum<T>>> inv_std;
	std::vector<std::vector<std::size_t>> argmax;
	const void* owner = nullptr;
	std::uint64_t generation = 0;

	const Tensor<T>& logits() const { return outputs.back(); }
	std::size_t batch_size() const { return input.dim(0); }

	const Tensor<T>& site_activation(const Model<T>& model, std::size_t site) const {
		return outputs.at(model.sites().at(site).node);
	}
};

/// Gradients of the injected objective with respect to every node output.
template <Scalar T>
struct SiteGradients {
	std::vector<Tensor<T>> node_grads;
	std::vector<Tensor<T>> sites;  // δx at each prunable site; same shape as the recorded x
	Tensor<T> input_grad;
};

/// Called after a node's parameter gradients were accumulated. Test hook.
template <Scalar T>
using ParamGradHook = std::function<void(std::size_t node, LayerNode<T>& layer)>;

namespace detail {

template <Scalar T>
Tensor<T> with_batch(std::size_t n, const Shape& s) {
	Shape full{n};
	full.insert(full.end(), s.begin(), s.end());
	return Tensor<T>(std::move(full));
}

// Keep mask reaching node i (site output or a BatchNorm fed by one), or null.
template <Scalar T>
std::vector<const std::vector<std::uint8_t>*> channel_masks(const Model<T>& model) {
	std::vector<const std::vector<std::uint8_t>*> out(model.size(), nullptr);
	for (const auto& s : model.sites())
		if (!model.masks()[s.site_id].empty()) out[s.node] = &model.masks()[s.site_id];
	for (std::size_t i = 0; i < model.size(); ++i) {
		const auto& n = model.node(i);
		if (n.kind == LayerKind::BatchNorm || n.kind == LayerKind::ReLU || n.kind == LayerKind::AvgPool ||
				n.kind == LayerKind::MaxPool) {
			if (n.inputs[0] >= 0) out[i] = out[static_cast<std::size_t>(n.inputs[0])];
		}
	}
	return out;
}

template <Scalar T>
void zero_masked_channels(Tensor<T>& t, const std::vector<std::uint8_t>& keep) {
	const std::size_t N = t.dim(0), C = t.dim(1), inner = t.size() / (N * C);
	for (std::size_t n = 0; n < N; ++n)
		for (std::size_t c = 0; c < C; ++c)
			if (!keep[c]) std::fill_n(t.data().begin() + (n * C + c) * inner, inner, T(0));
}

template <Scalar T>
Tensor<T> linear_forward(const Tensor<T>& x, const LayerNode<T>& node) {
	const std::size_t N = x.dim(0), I = x.dim(1), O = node.weight.dim(0);
	Tensor<T> y({N, O});
	for (std::size_t n = 0; n < N; ++n)
		for (std::size_t o = 0; o < O; ++o) {
			T acc = T(0);
			const T* xr = x.data().data() + n * I;
			const T* wr = node.weight.data().data() + o * I;
			for (std::size_t i = 0; i < I; ++i) acc += xr[i] * wr[i];
			y.at(n, o) = node.has_bias() ? acc + node.bias[o] : acc;
		}
	return y;
}

template <Scalar T>
Tensor<T> pool_forward(const Tensor<T>& x, const LayerNode<T>& node, std::vector<std::size_t>* argmax) {
	const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = node.window;
	const std::size_t OH = H / k, OW = W / k;
	Tensor<T> y({N, C, OH, OW});
	if (argmax) argmax->assign(y.size(), 0);
	const bool is_max = node.kind == LayerKind::MaxPool;
	const T inv_area = T(1) / static_cast<T>(k * k);
	std::size_t o = 0;
	for (std::size_t n = 0; n < N; ++n)
		for (std::size_t c = 0; c < C; ++c)
			for (std::size_t oh = 0; oh < OH; ++oh)
				for (std::size_t ow = 0; ow < OW; ++ow, ++o) {
					T acc = is_max ? -std::numeric_limits<T>::infinity() : T(0);
					std::size_t best = 0;
					for (std::size_t i = 0; i < k; ++i)
						for (std::size_t j = 0; j < k; ++j) {
							const std::size_t idx = ((n * C + c) * H + oh * k + i) * W + ow * k + j;
							if (is_max) {
								if (x[idx] > acc) {
									acc = x[idx];
									best = idx;
								}
							} else {
								acc += x[idx];
							}
						}
					y[o] = is_max ? acc : acc * inv_area;
					if (argmax) (*argmax)[o] = best;
				}
	return y;
}

}  // namespace detail

template <Scalar T>
void rerun_from(Model<T>& model, ForwardRecord<T>& rec, std::size_t first);

/**
 * Runs the graph on a batch. In Train mode BatchNorm normalizes with batch
 * statistics and updates its running statistics; in Eval mode it uses the
 * running statistics. Masked channels are forced to zero at their site and at
 * the BatchNorm that follows it, so they contribute nothing downstream.
 */
template <Scalar T>
ForwardRecord<T> forward(Model<T>& model, const Tensor<T>& input, Mode mode) {
	Shape expected{input.rank() > 0 ? input.dim(0) : 0};
	expected.insert(expected.end(), model.input_shape().begin(), model.input_shape().end());
	if (input.shape() != expected)
		throw DimensionError("model input " + detail::shape_str(input.shape()) + " does not match expected " +
				detail::shape_str(expected));
	ForwardRecord<T> rec;
	rec.mode = mode;
	rec.input = input;
	rec.outputs.resize(model.size());
	rec.normalized.resize(model.size());
	rec.inv_std.resize(model.size());
	rec.argmax.resize(model.size());
	rerun_from(model, rec, 0);
	return rec;
}

/**
 * Recomputes nodes [first, end) of an existing record, reusing the stored
 * outputs of earlier nodes. Used by finite-difference probes that perturb a
 * single node's parameters.
 */
template <Scalar T>
void rerun_from(Model<T>& model, ForwardRecord<T>& rec, std::size_t first) {
	const std::size_t N = rec.input.dim(0);
	const Mode mode = rec.mode;
	const auto masks = detail::channel_masks(model);

	auto in = [&](int ref) -> const Tensor<T>& {
		return ref == kModelInput ? rec.input : rec.outputs[static_cast<std::size_t>(ref)];
	};

	for (std::size_t i = first; i < model.size(); ++i) {
		auto& node = model.node(i);
		const Tensor<T>& x = in(node.inputs[0]);
		Tensor<T> y;
		switch (node.kind) {
		case LayerKind::Conv2d: {
			y = conv2d(x, node.weight, node.conv);
			if (node.has_bias()) {
				const std::size_t F = y.dim(1), inner = y.dim(2) * y.dim(3);
				for (std::size_t n = 0; n < N; ++n)
					for (std::size_t f = 0; f < F; ++f) {
						T* p = y.data().data() + (n * F + f) * inner;
						for (std::size_t j = 0; j < inner; ++j) p[j] += node.bias[f];
					}
			}
			break;
		}
		case LayerKind::Linear:
			y = detail::linear_forward(x, node);
			break;
		case LayerKind::BatchNorm: {
			const std::size_t C = x.dim(1), inner = x.size() / (N * C);
			const Accum<T> count = static_cast<Accum<T>>(N * inner);
			Tensor<T> xhat(x.shape());
			y = Tensor<T>(x.shape());
			std::vector<Accum<T>> inv(C);
			for (std::size_t c = 0; c < C; ++c) {
				Accum<T> mean, var;
				if (mode == Mode::Train) {
					Accum<T> s = 0;
					for (std::size_t n = 0; n < N; ++n)
						for (std::size_t j = 0; j < inner; ++j) s += x[(n * C + c) * inner + j];
					mean = s / count;
					Accum<T> ss = 0;
					for (std::size_t n = 0; n < N; ++n)
						for (std::size_t j = 0; j < inner; ++j) {
							const Accum<T> d = x[(n * C + c) * inner + j] - mean;
							ss += d * d;
						}
					var = ss / count;
					const Accum<T> unbiased = count > 1 ? ss / (count - 1) : var;
					node.running_mean[c] = static_cast<T>((1 - node.momentum) * node.running_mean[c] + node.momentum * mean);
					node.running_var[c] = static_cast<T>((1 - node.momentum) * node.running_var[c] + node.momentum * unbiased);
				} else {
					mean = node.running_mean[c];
					var = node.running_var[c];
				}
				inv[c] = 1.0 / std::sqrt(var + node.eps);
				for (std::size_t n = 0; n < N; ++n)
					for (std::size_t j = 0; j < inner; ++j) {
						const std::size_t idx = (n * C + c) * inner + j;
						xhat[idx] = static_cast<T>((x[idx] - mean) * inv[c]);
						y[idx] = node.gamma[c] * xhat[idx] + node.beta[c];
					}
			}
			rec.normalized[i] = std::move(xhat);
			rec.inv_std[i] = std::move(inv);
			break;
		}
		case LayerKind::ReLU:
			y = relu(x);
			break;
		case LayerKind::AvgPool:
			y = detail::pool_forward(x, node, nullptr);
			break;
		case LayerKind::MaxPool:
			y = detail::pool_forward(x, node, &rec.argmax[i]);
			break;
		case LayerKind::ResidualAdd: {
			const Tensor<T>& x2 = in(node.inputs[1]);
			if (x.shape() != x2.shape())
				throw DimensionError(detail::node_tag(i, node.kind) + ": residual operands " +
						detail::shape_str(x.shape()) + " and " + detail::shape_str(x2.shape()));
			y = add(x, x2);
			break;
		}
		case LayerKind::Flatten:
			y = x.reshaped({N, x.size() / N});
			break;
		}
		if (masks[i] && (node.has_weight() || node.kind == LayerKind::BatchNorm))
			detail::zero_masked_channels(y, *masks[i]);
		rec.outputs[i] = std::move(y);
	}
	rec.owner = &model;
	rec.generation = model.next_generation();
}

/// Eval-mode logits without retaining a record.
template <Scalar T>
Tensor<T> infer(const Model<T>& model, const Tensor<T>& input) {
	Model<T> scratch = model;
	return forward(scratch, input, Mode::Eval).logits();
}

/**
 * Reverse pass from an arbitrary output gradient. Parameter gradients are
 * accumulated into the model nodes (the caller zeroes them between steps).
 * The output gradient does not have to come from a loss.
 */
template <Scalar T>
SiteGradients<T> backward(Model<T>& model, const ForwardRecord<T>& rec, const Tensor<T>& output_grad,
		const ParamGradHook<T>& hook = {}) {
	if (rec.owner != &model || rec.outputs.size() != model.size() || rec.generation != model.generation())
		throw StateError("backward needs the record of the immediately preceding forward on this model");
	if (output_grad.shape() != rec.logits().shape())
		throw DimensionError("output gradient " + detail::shape_str(output_grad.shape()) + " does not match logits " +
				detail::shape_str(rec.logits().shape()));
	const std::size_t N = rec.batch_size();
	const auto masks = detail::channel_masks(model);

	SiteGradients<T> g;
	g.node_grads.resize(model.size());
	for (std::size_t i = 0; i < model.size(); ++i) g.node_grads[i] = Tensor<T>(rec.outputs[i].shape());
	g.input_grad = Tensor<T>(rec.input.shape());
	g.node_grads.back() = add(g.node_grads.back(), output_grad);

	auto in = [&](int ref) -> const Tensor<T>& {
		return ref == kModelInput ? rec.input : rec.outputs[static_cast<std::size_t>(ref)];
	};
	auto grad_of = [&](int ref) -> Tensor<T>& {
		return ref == kModelInput ? g.input_grad : g.node_grads[static_cast<std::size_t>(ref)];
	};
	auto accumulate = [](Tensor<T>& dst, const Tensor<T>& src) {
		for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
	};

	for (std::size_t i = model.size(); i-- > 0;) {
		auto& node = model.node(i);
		Tensor<T> dy = g.node_grads[i];
		if (masks[i] && (node.has_weight() || node.kind == LayerKind::BatchNorm))
			detail::zero_masked_channels(dy, *masks[i]);
		const Tensor<T>& x = in(node.inputs[0]);
		Tensor<T>& dx = grad_of(node.inputs[0]);
		switch (node.kind) {
		case LayerKind::Conv2d: {
			auto cg = conv2d_backward(x, node.weight, dy, node.conv);
			accumulate(node.grad_weight, cg.grad_weight);
			if (node.has_bias()) {
				const std::size_t F = dy.dim(1), inner = dy.dim(2) * dy.dim(3);
				for (std::size_t n = 0; n < N; ++n)
					for (std::size_t f = 0; f < F; ++f) {
						T acc = T(0);
						const T* p = dy.data().data() + (n * F + f) * inner;
						for (std::size_t j = 0; j < inner; ++j) acc += p[j];
						node.grad_bias[f] += acc;
					}
			}
			accumulate(dx, cg.grad_input);
			break;
		}
		case LayerKind::Linear: {
			const std::size_t I = x.dim(1), O = node.weight.dim(0);
			for (std::size_t n = 0; n < N; ++n)
				for (std::size_t o = 0; o < O; ++o) {
					const T d = dy.at(n, o);
					const T* xr = x.data().data() + n * I;
					T* gw = node.grad_weight.data().data() + o * I;
					for (std::size_t k = 0; k < I; ++k) gw[k] += d * xr[k];
					if (node.has_bias()) node.grad_bias[o] += d;
				}
			for (std::size_t n = 0; n < N; ++n)
				for (std::size_t k = 0; k < I; ++k) {
					T acc = T(0);
					for (std::size_t o = 0; o < O; ++o) acc += dy.at(n, o) * node.weight.at(o, k);
					dx.at(n, k) += acc;
				}
			break;
		}
		case LayerKind::BatchNorm: {
			const std::size_t C = x.dim(1), inner = x.size() / (N * C);
			const Tensor<T>& xhat = rec.normalized[i];
			const Accum<T> count = static_cast<Accum<T>>(N * inner);
			for (std::size_t c = 0; c < C; ++c) {
				Accum<T> sum_dy = 0, sum_dy_xhat = 0;
				for (std::size_t n = 0; n < N; ++n)
					for (std::size_t j = 0; j < inner; ++j) {
						const std::size_t idx = (n * C + c) * inner + j;
						sum_dy += dy[idx];
						sum_dy_xhat += static_cast<Accum<T>>(dy[idx]) * xhat[idx];
					}
				node.grad_gamma[c] += static_cast<T>(sum_dy_xhat);
				node.grad_beta[c] += static_cast<T>(sum_dy);
				const Accum<T> gamma = node.gamma[c], inv = rec.inv_std[i][c];
				for (std::size_t n = 0; n < N; ++n)
					for (std::size_t j = 0; j < inner; ++j) {
						const std::size_t idx = (n * C + c) * inner + j;
						if (rec.mode == Mode::Train)
							dx[idx] += static_cast<T>(gamma * inv / count *
									(count * dy[idx] - sum_dy - xhat[idx] * sum_dy_xhat));
						else
							dx[idx] += static_cast<T>(gamma * inv * dy[idx]);
					}
			}
			break;
		}
		case LayerKind::ReLU:
			for (std::size_t k = 0; k < dy.size(); ++k)
				if (x[k] > T(0)) dx[k] += dy[k];
			break;
		case LayerKind::MaxPool: {
			const auto& am = rec.argmax[i];
			for (std::size_t k = 0; k < dy.size(); ++k) dx[am[k]] += dy[k];
			break;
		}
		case LayerKind::AvgPool: {
			const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3), k = node.window;
			const std::size_t OH = H / k, OW = W / k;
			const T inv_area = T(1) / static_cast<T>(k * k);
			std::size_t o = 0;
			for (std::size_t n = 0; n < N; ++n)
				for (std::size_t c = 0; c < C; ++c)
					for (std::size_t oh = 0; oh < OH; ++oh)
						for (std::size_t ow = 0; ow < OW; ++ow, ++o)
							for (std::size_t a = 0; a < k; ++a)
								for (std::size_t b = 0; b < k; ++b)
									dx[((n * C + c) * H + oh * k + a) * W + ow * k + b] += dy[o] * inv_area;
			break;
		}
		case LayerKind::ResidualAdd:
			accumulate(dx, dy);
			accumulate(grad_of(node.inputs[1]), dy);
			break;
		case LayerKind::Flatten:
			accumulate(dx, dy);
			break;
		}
		if (hook && (node.has_weight() || node.kind == LayerKind::BatchNorm)) hook(i, node);
	}

	g.sites.reserve(model.sites().size());
	for (const auto& s : model.sites()) g.sites.push_back(g.node_grads[s.node]);
	return g;
}

template <Scalar T>
struct LossResult {
	double loss = 0;
	Tensor<T> grad_logits;
};

/// Mean softmax cross-entropy over the batch; grad = (softmax − onehot) / N.
template <Scalar T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
	if (logits.rank() != 2) throw DimensionError("logits must be N×K, got " + detail::shape_str(logits.shape()));
	const std::size_t N = logits.dim(0), K = logits.dim(1);
	if (labels.size() != N)
		throw InputError("got " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(N));
	LossResult<T> r{0.0, Tensor<T>(logits.shape())};
	for (std::size_t n = 0; n < N; ++n) {
		const int label = labels[n];
		if (label < 0 || static_cast<std::size_t>(label) >= K)
			throw InputError("label " + std::to_string(label) + " outside [0, " + std::to_string(K) + ")");
		double mx = -std::numeric_limits<double>::infinity();
		for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(logits.at(n, k)));
		double z = 0;
		for (std::size_t k = 0; k < K; ++k) z += std::exp(logits.at(n, k) - mx);
		const double log_z = std::log(z) + mx;
		r.loss += log_z - logits.at(n, static_cast<std::size_t>(label));
		for (std::size_t k = 0; k < K; ++k) {
			const double p = std::exp(logits.at(n, k) - log_z);
			const double onehot = k == static_cast<std::size_t>(label) ? 1.0 : 0.0;
			r.grad_logits.at(n, k) = static_cast<T>((p - onehot) / static_cast<double>(N));
		}
	}
	r.loss /= static_cast<double>(N);
	return r;
}

}  // namespace chanprune

#endif  // CHANPRUNE_ENGINE_HPP_
