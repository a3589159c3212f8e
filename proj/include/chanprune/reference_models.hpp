#ifndef CHANPRUNE_REFERENCE_MODELS_HPP_
#define CHANPRUNE_REFERENCE_MODELS_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "model.hpp"

namespace chanprune {

struct ReferenceConfig {
	std::size_t num_classes = 4;
	std::size_t in_channels = 1;
	std::size_t image_size = 16;
	std::uint64_t seed = 1;
};

/// MLP with two hidden layers of 32 units: flatten → (linear → BN → ReLU) × 2 → linear.
template <Scalar T>
Model<T> make_mlp_small(const ReferenceConfig& cfg) {
	ModelBuilder<T> b("mlp_small", {cfg.in_channels, cfg.image_size, cfg.image_size}, cfg.num_classes, cfg.seed);
	int x = b.flatten(kModelInput);
	x = b.relu(b.batch_norm(b.linear(x, 32, false)));
	x = b.relu(b.batch_norm(b.linear(x, 32, false)));
	b.linear(x, cfg.num_classes);
	return std::move(b).build();
}

/// VGG-style: three conv3×3 → BN → ReLU → pool blocks with 16, 24 and 32 channels.
template <Scalar T>
Model<T> make_cnn_small(const ReferenceConfig& cfg) {
	ModelBuilder<T> b("cnn_small", {cfg.in_channels, cfg.image_size, cfg.image_size}, cfg.num_classes, cfg.seed);
	int x = kModelInput;
	x = b.max_pool(b.relu(b.batch_norm(b.conv(x, 16, 3, 1, 1, false))));
	x = b.max_pool(b.relu(b.batch_norm(b.conv(x, 24, 3, 1, 1, false))));
	x = b.avg_pool(b.relu(b.batch_norm(b.conv(x, 32, 3, 1, 1, false))));
	b.linear(b.flatten(x), cfg.num_classes);
	return std::move(b).build();
}

/**
 * Stem conv (16) → pool → one residual block (conv → BN → ReLU → conv → BN, added
 * to the pooled stem) → ReLU → conv (24) → BN → ReLU → pool → linear.
 * Only the block's interior conv and the post-block conv are prunable; the stem
 * and the block's second conv feed the addition.
 */
template <Scalar T>
Model<T> make_cnn_residual(const ReferenceConfig& cfg) {
	ModelBuilder<T> b("cnn_residual", {cfg.in_channels, cfg.image_size, cfg.image_size}, cfg.num_classes, cfg.seed);
	int stem = b.max_pool(b.relu(b.batch_norm(b.conv(kModelInput, 16, 3, 1, 1, false))));
	int r = b.relu(b.batch_norm(b.conv(stem, 16, 3, 1, 1, false)));
	r = b.batch_norm(b.conv(r, 16, 3, 1, 1, false));
	int x = b.relu(b.add(stem, r));
	x = b.avg_pool(b.relu(b.batch_norm(b.conv(x, 24, 3, 1, 1, false))));
	b.linear(b.flatten(x), cfg.num_classes);
	return std::move(b).build();
}

inline const std::vector<std::string>& reference_model_names() {
	static const std::vector<std::string> names{"mlp_small", "cnn_small", "cnn_residual"};
	return names;
}

template <Scalar T>
Model<T> make_reference_model(const std::string& name, const ReferenceConfig& cfg) {
	if (name == "mlp_small") return make_mlp_small<T>(cfg);
	if (name == "cnn_small") return make_cnn_small<T>(cfg);
	if (name == "cnn_residual") return make_cnn_residual<T>(cfg);
	throw InputError("unknown model '" + name + "' (expected mlp_small, cnn_small or cnn_residual)");
}

template <Scalar T>
struct ReferenceModels {
	Model<T> mlp_small;
	Model<T> cnn_small;
	Model<T> cnn_residual;
};

template <Scalar T>
ReferenceModels<T> build_reference_models(const ReferenceConfig& cfg = {}) {
	return {make_mlp_small<T>(cfg), make_cnn_small<T>(cfg), make_cnn_residual<T>(cfg)};
}

}  // namespace chanprune

#endif  // CHANPRUNE_REFERENCE_MODELS_HPP_
