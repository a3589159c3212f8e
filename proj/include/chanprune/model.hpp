#ifndef CHANPRUNE_MODEL_HPP_
#define CHANPRUNE_MODEL_HPP_

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace chanprune {

enum class LayerKind { Conv2d, Linear, BatchNorm, ReLU, AvgPool, MaxPool, ResidualAdd, Flatten };

inline std::string_view kind_name(LayerKind kind) {
	switch (kind) {
	case LayerKind::Conv2d: return "conv2d";
	case LayerKind::Linear: return "linear";
	case LayerKind::BatchNorm: return "batchnorm";
	case LayerKind::ReLU: return "relu";
	case LayerKind::AvgPool: return "avgpool";
	case LayerKind::MaxPool: return "maxpool";
	case LayerKind::ResidualAdd: return "add";
	case LayerKind::Flatten: return "flatten";
	}
	return "?";
}

inline LayerKind parse_kind(std::string_view name) {
	for (auto k : {LayerKind::Conv2d, LayerKind::Linear, LayerKind::BatchNorm, LayerKind::ReLU, LayerKind::AvgPool,
			     LayerKind::MaxPool, LayerKind::ResidualAdd, LayerKind::Flatten})
		if (kind_name(k) == name) return k;
	throw InputError("unknown layer kind '" + std::string(name) + "'");
}

/// Node input reference meaning "the model input tensor".
inline constexpr int kModelInput = -1;

/**
 * One layer of the graph. Parameters that do not apply to the node's kind are
 * left empty. Gradients always have the shapes of their parameters.
 */
template <Scalar T>
struct LayerNode {
	LayerKind kind = LayerKind::ReLU;
	std::vector<int> inputs;

	// Conv2d: weight F×C×kH×kW. Linear: weight out×in. Bias is optional.
	Tensor<T> weight, bias;
	Tensor<T> grad_weight, grad_bias;
	Conv2dParams conv;

	// Pooling uses kernel = stride = window.
	std::size_t window = 2;

	// BatchNorm
	Tensor<T> gamma, beta, running_mean, running_var;
	Tensor<T> grad_gamma, grad_beta;
	double eps = 1e-5;
	double momentum = 0.1;

	/// Cleared by the builder for Conv2d/Linear nodes that must never be pruned.
	bool allow_prune = true;

	bool has_weight() const { return kind == LayerKind::Conv2d || kind == LayerKind::Linear; }
	bool has_bias() const { return !bias.empty(); }

	std::size_t out_channels() const {
		if (has_weight()) return weight.dim(0);
		if (kind == LayerKind::BatchNorm) return gamma.size();
		return 0;
	}

	void zero_grad() {
		auto reset = [](const Tensor<T>& p, Tensor<T>& g) {
			if (p.empty())
				g = Tensor<T>();
			else if (g.shape() != p.shape())
				g = Tensor<T>(p.shape());
			else
				g.fill(T(0));
		};
		reset(weight, grad_weight);
		reset(bias, grad_bias);
		reset(gamma, grad_gamma);
		reset(beta, grad_beta);
	}

	/// Trainable parameter count (running statistics excluded).
	std::size_t parameter_count() const { return weight.size() + bias.size() + gamma.size() + beta.size(); }
};

/// A Conv2d/Linear output whose channels can be ranked and removed independently.
struct PrunableSite {
	std::size_t site_id = 0;
	std::size_t node = 0;
	std::size_t channels = 0;
};

/// Per-node output shapes, batch axis excluded. Index i is node i.
using ShapeTable = std::vector<Shape>;

template <Scalar T>
class Model {
public:
	Model() = default;
	Model(std::string name, Shape input_shape, std::size_t num_classes, std::vector<LayerNode<T>> nodes)
			: name_(std::move(name)), input_shape_(std::move(input_shape)), num_classes_(num_classes),
			  nodes_(std::move(nodes)) {
		rebuild();
	}

	const std::string& name() const { return name_; }
	const Shape& input_shape() const { return input_shape_; }
	std::size_t num_classes() const { return num_classes_; }

	std::size_t size() const { return nodes_.size(); }
	const std::vector<LayerNode<T>>& nodes() const { return nodes_; }
	const LayerNode<T>& node(std::size_t i) const { return nodes_.at(i); }
	/// Mutable access for parameter edits. Call `rebuild()` after changing shapes.
	LayerNode<T>& node(std::size_t i) { return nodes_.at(i); }

	const std::vector<PrunableSite>& sites() const { return sites_; }
	const ShapeTable& shapes() const { return shapes_; }

	/// Site index of node `i`, if it is a prunable site.
	std::optional<std::size_t> site_of(std::size_t i) const {
		for (const auto& s : sites_)
			if (s.node == i) return s.site_id;
		return std::nullopt;
	}

	std::size_t total_prunable_channels() const {
		std::size_t n = 0;
		for (const auto& s : sites_) n += s.channels;
		return n;
	}

	/// Per-site keep masks; an empty vector means every channel is kept.
	const std::vector<std::vector<std::uint8_t>>& masks() const { return masks_; }
	void set_masks(std::vector<std::vector<std::uint8_t>> masks) {
		if (masks.size() != sites_.size())
			throw InputError("mask has " + std::to_string(masks.size()) + " sites, model has " +
					std::to_string(sites_.size()));
		for (std::size_t s = 0; s < masks.size(); ++s)
			if (!masks[s].empty() && masks[s].size() != sites_[s].channels)
				throw InputError("mask for site " + std::to_string(s) + " has " + std::to_string(masks[s].size()) +
						" channels, site has " + std::to_string(sites_[s].channels));
		masks_ = std::move(masks);
	}
	void clear_masks() { masks_.assign(sites_.size(), {}); }

	std::size_t parameter_count() const {
		std::size_t n = 0;
		for (const auto& node : nodes_) n += node.parameter_count();
		return n;
	}

	void zero_grad() {
		for (auto& n : nodes_) n.zero_grad();
	}

	/// Revalidates the graph, recomputes shapes and the prunable-site list.
	void rebuild();

	template <Scalar U>
	Model<U> cast() const;

	/// Stamp used to reject backward passes on a stale ForwardRecord.
	std::uint64_t next_generation() const { return ++generation_; }
	std::uint64_t generation() const { return generation_; }

private:
	void validate_and_infer();
	void declare_sites();

	std::string name_;
	Shape input_shape_;
	std::size_t num_classes_ = 0;
	std::vector<LayerNode<T>> nodes_;
	std::vector<PrunableSite> sites_;
	std::vector<std::vector<std::uint8_t>> masks_;
	ShapeTable shapes_;
	mutable std::uint64_t generation_ = 0;
};

namespace detail {

inline std::string node_tag(std::size_t i, LayerKind k) {
	return "node " + std::to_string(i) + " (" + std::string(kind_name(k)) + ")";
}

}  // namespace detail

template <Scalar T>
void Model<T>::validate_and_infer() {
	if (nodes_.empty()) throw InputError("model has no nodes");
	if (num_classes_ == 0) throw InputError("num_classes must be positive");
	shapes_.assign(nodes_.size(), {});
	auto in_shape = [&](std::size_t i, int ref) -> const Shape& {
		if (ref == kModelInput) return input_shape_;
		if (ref < 0 || static_cast<std::size_t>(ref) >= i)
			throw InputError(detail::node_tag(i, nodes_[i].kind) + " references node " + std::to_string(ref) +
					" which does not precede it");
		return shapes_[static_cast<std::size_t>(ref)];
	};
	for (std::size_t i = 0; i < nodes_.size(); ++i) {
		auto& n = nodes_[i];
		const std::string tag = detail::node_tag(i, n.kind);
		const std::size_t expected_inputs = n.kind == LayerKind::ResidualAdd ? 2 : 1;
		if (n.inputs.size() != expected_inputs)
			throw InputError(tag + " expects " + std::to_string(expected_inputs) + " inputs");
		const Shape& s = in_shape(i, n.inputs[0]);
		switch (n.kind) {
		case LayerKind::Conv2d: {
			if (s.size() != 3 || n.weight.rank() != 4 || n.weight.dim(1) != s[0])
				throw DimensionError(tag + ": input " + detail::shape_str(s) + " incompatible with weight " +
						detail::shape_str(n.weight.shape()));
			if (n.has_bias() && n.bias.size() != n.weight.dim(0))
				throw DimensionError(tag + ": bias length mismatch");
			shapes_[i] = {n.weight.dim(0), conv_output_extent(s[1], n.weight.dim(2), n.conv),
					conv_output_extent(s[2], n.weight.dim(3), n.conv)};
			break;
		}
		case LayerKind::Linear: {
			if (s.size() != 1 || n.weight.rank() != 2 || n.weight.dim(1) != s[0])
				throw DimensionError(tag + ": input " + detail::shape_str(s) + " incompatible with weight " +
						detail::shape_str(n.weight.shape()));
			if (n.has_bias() && n.bias.size() != n.weight.dim(0))
				throw DimensionError(tag + ": bias length mismatch");
			shapes_[i] = {n.weight.dim(0)};
			break;
		}
		case LayerKind::BatchNorm: {
			const std::size_t c = s[0];
			for (const Tensor<T>* p : {&n.gamma, &n.beta, &n.running_mean, &n.running_var})
				if (p->size() != c) throw DimensionError(tag + ": parameter length does not match " + std::to_string(c) + " channels");
			for (auto v : n.running_var.data())
				if (!(v > T(0))) throw InputError(tag + ": running variance must be positive");
			if (!(n.eps > 0)) throw InputError(tag + ": epsilon must be positive");
			shapes_[i] = s;
			break;
		}
		case LayerKind::ReLU:
			shapes_[i] = s;
			break;
		case LayerKind::AvgPool:
		case LayerKind::MaxPool: {
			if (s.size() != 3 || n.window == 0 || s[1] < n.window || s[2] < n.window)
				throw ShapeError(tag + ": cannot pool " + detail::shape_str(s) + " with window " + std::to_string(n.window));
			shapes_[i] = {s[0], s[1] / n.window, s[2] / n.window};
			break;
		}
		case LayerKind::ResidualAdd: {
			const Shape& s2 = in_shape(i, n.inputs[1]);
			if (s != s2)
				throw DimensionError(tag + ": residual inputs differ: " + detail::shape_str(s) + " vs " + detail::shape_str(s2));
			shapes_[i] = s;
			break;
		}
		case LayerKind::Flatten:
			shapes_[i] = {shape_volume(s)};
			break;
		}
	}
	if (shapes_.back() != Shape{num_classes_})
		throw DimensionError("model output shape " + detail::shape_str(shapes_.back()) + " does not match " +
				std::to_string(num_classes_) + " classes");
}

template <Scalar T>
void Model<T>::declare_sites() {
	// A Conv2d/Linear output is prunable unless it is the classifier or its
	// channels flow (through BN / ReLU / pooling / flatten) into a residual add.
	std::vector<std::vector<std::size_t>> consumers(nodes_.size());
	for (std::size_t i = 0; i < nodes_.size(); ++i)
		for (int r : nodes_[i].inputs)
			if (r >= 0) consumers[static_cast<std::size_t>(r)].push_back(i);

	sites_.clear();
	for (std::size_t i = 0; i < nodes_.size(); ++i) {
		const auto& n = nodes_[i];
		if (!n.has_weight() || !n.allow_prune || i + 1 == nodes_.size()) continue;
		bool coupled = false;
		std::vector<std::size_t> frontier{i};
		while (!frontier.empty() && !coupled) {
			const std::size_t cur = frontier.back();
			frontier.pop_back();
			for (std::size_t c : consumers[cur]) {
				const LayerKind k = nodes_[c].kind;
				if (k == LayerKind::ResidualAdd)
					coupled = true;
				else if (k != LayerKind::Conv2d && k != LayerKind::Linear)
					frontier.push_back(c);
			}
		}
		if (coupled) continue;
		sites_.push_back({sites_.size(), i, n.out_channels()});
	}
}

template <Scalar T>
void Model<T>::rebuild() {
	validate_and_infer();
	declare_sites();
	if (masks_.size() != sites_.size()) masks_.assign(sites_.size(), {});
	for (std::size_t s = 0; s < sites_.size(); ++s)
		if (!masks_[s].empty() && masks_[s].size() != sites_[s].channels) masks_[s].clear();
	zero_grad();
}

template <Scalar T>
template <Scalar U>
Model<U> Model<T>::cast() const {
	std::vector<LayerNode<U>> out;
	out.reserve(nodes_.size());
	for (const auto& n : nodes_) {
		LayerNode<U> m;
		m.kind = n.kind;
		m.inputs = n.inputs;
		auto cp = [](const Tensor<T>& t) { return t.empty() ? Tensor<U>() : t.template cast<U>(); };
		m.weight = cp(n.weight);
		m.bias = cp(n.bias);
		m.conv = n.conv;
		m.window = n.window;
		m.gamma = cp(n.gamma);
		m.beta = cp(n.beta);
		m.running_mean = cp(n.running_mean);
		m.running_var = cp(n.running_var);
		m.eps = n.eps;
		m.momentum = n.momentum;
		m.allow_prune = n.allow_prune;
		out.push_back(std::move(m));
	}
	Model<U> result(name_, input_shape_, num_classes_, std::move(out));
	result.set_masks(masks_);
	return result;
}

/**
 * Incremental graph construction with Kaiming-uniform (fan-in) initialization
 * of conv/linear weights, γ = 1, β = 0, running mean 0, running variance 1.
 * Weights of node i are drawn from a stream keyed by (seed, i).
 */
template <Scalar T>
class ModelBuilder {
public:
	ModelBuilder(std::string name, Shape input_shape, std::size_t num_classes, std::uint64_t seed)
			: name_(std::move(name)), input_shape_(std::move(input_shape)), num_classes_(num_classes), seed_(seed) {}

	int conv(int input, std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
			std::size_t padding = 0, bool bias = true) {
		const Shape& s = shape_of(input);
		if (s.size() != 3) throw DimensionError("conv needs a C×H×W input, got " + detail::shape_str(s));
		LayerNode<T> n;
		n.kind = LayerKind::Conv2d;
		n.inputs = {input};
		n.conv = {stride, padding};
		n.weight = Tensor<T>({out_channels, s[0], kernel, kernel});
		if (bias) n.bias = Tensor<T>({out_channels});
		init_affine(n, s[0] * kernel * kernel);
		Shape out{out_channels, conv_output_extent(s[1], kernel, n.conv), conv_output_extent(s[2], kernel, n.conv)};
		return push(std::move(n), std::move(out));
	}

	int linear(int input, std::size_t out_features, bool bias = true) {
		const Shape& s = shape_of(input);
		if (s.size() != 1) throw DimensionError("linear needs a flat input, got " + detail::shape_str(s));
		LayerNode<T> n;
		n.kind = LayerKind::Linear;
		n.inputs = {input};
		n.weight = Tensor<T>({out_features, s[0]});
		if (bias) n.bias = Tensor<T>({out_features});
		init_affine(n, s[0]);
		return push(std::move(n), {out_features});
	}

	int batch_norm(int input, double eps = 1e-5, double momentum = 0.1) {
		const Shape s = shape_of(input);
		LayerNode<T> n;
		n.kind = LayerKind::BatchNorm;
		n.inputs = {input};
		n.gamma = Tensor<T>({s[0]}, T(1));
		n.beta = Tensor<T>({s[0]});
		n.running_mean = Tensor<T>({s[0]});
		n.running_var = Tensor<T>({s[0]}, T(1));
		n.eps = eps;
		n.momentum = momentum;
		return push(std::move(n), s);
	}

	int relu(int input) { return simple(LayerKind::ReLU, input, shape_of(input)); }

	int max_pool(int input, std::size_t window = 2) { return pool(LayerKind::MaxPool, input, window); }
	int avg_pool(int input, std::size_t window = 2) { return pool(LayerKind::AvgPool, input, window); }

	int flatten(int input) { return simple(LayerKind::Flatten, input, {shape_volume(shape_of(input))}); }

	int add(int a, int b) {
		if (shape_of(a) != shape_of(b))
			throw DimensionError("residual add of " + detail::shape_str(shape_of(a)) + " and " +
					detail::shape_str(shape_of(b)));
		LayerNode<T> n;
		n.kind = LayerKind::ResidualAdd;
		n.inputs = {a, b};
		return push(std::move(n), shape_of(a));
	}

	/// Excludes a conv/linear node from the prunable-site list.
	void mark_non_prunable(int node) { nodes_.at(static_cast<std::size_t>(node)).allow_prune = false; }

	const Shape& shape_of(int node) const {
		return node == kModelInput ? input_shape_ : shapes_.at(static_cast<std::size_t>(node));
	}

	Model<T> build() && { return Model<T>(std::move(name_), std::move(input_shape_), num_classes_, std::move(nodes_)); }

private:
	int simple(LayerKind kind, int input, Shape out) {
		LayerNode<T> n;
		n.kind = kind;
		n.inputs = {input};
		return push(std::move(n), std::move(out));
	}

	int pool(LayerKind kind, int input, std::size_t window) {
		const Shape& s = shape_of(input);
		if (s.size() != 3) throw DimensionError("pooling needs a C×H×W input, got " + detail::shape_str(s));
		LayerNode<T> n;
		n.kind = kind;
		n.inputs = {input};
		n.window = window;
		Shape out{s[0], s[1] / window, s[2] / window};
		return push(std::move(n), std::move(out));
	}

	void init_affine(LayerNode<T>& n, std::size_t fan_in) {
		auto rng = keyed_engine(seed_, nodes_.size());
		const double wb = std::sqrt(6.0 / static_cast<double>(fan_in));
		std::uniform_real_distribution<double> wdist(-wb, wb);
		for (auto& v : n.weight.data()) v = static_cast<T>(wdist(rng));
		const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
		std::uniform_real_distribution<double> bdist(-bb, bb);
		for (auto& v : n.bias.data()) v = static_cast<T>(bdist(rng));
	}

	int push(LayerNode<T> n, Shape out) {
		nodes_.push_back(std::move(n));
		shapes_.push_back(std::move(out));
		return static_cast<int>(nodes_.size() - 1);
	}

	std::string name_;
	Shape input_shape_;
	std::size_t num_classes_;
	std::uint64_t seed_;
	std::vector<LayerNode<T>> nodes_;
	ShapeTable shapes_;
};

}  // namespace chanprune

#endif  // CHANPRUNE_MODEL_HPP_
