// Shared test fixtures: small hand-built models and parameter perturbations.
#ifndef CHANPRUNE_TESTS_FIXTURES_HPP_
#define CHANPRUNE_TESTS_FIXTURES_HPP_

#include <cstdint>
#include <random>

#include <chanprune/chanprune.hpp>

namespace fixture {

using namespace chanprune;

/// Random γ, β, running mean and running variance in every BatchNorm node,
/// so eval-mode forwards are not near-identity maps.
template <Scalar T>
void randomize_batchnorm(Model<T>& m, std::uint64_t seed) {
	std::mt19937_64 rng(seed);
	std::uniform_real_distribution<double> g(0.5, 1.5), b(-0.5, 0.5), var(0.5, 2.0);
	for (std::size_t i = 0; i < m.size(); ++i) {
		auto& n = m.node(i);
		if (n.kind != LayerKind::BatchNorm) continue;
		for (std::size_t c = 0; c < n.gamma.size(); ++c) {
			n.gamma[c] = static_cast<T>(g(rng));
			n.beta[c] = static_cast<T>(b(rng));
			n.running_mean[c] = static_cast<T>(b(rng));
			n.running_var[c] = static_cast<T>(var(rng));
		}
	}
}

/// Single linear layer K×I with the given weight and zero bias; input shape {I}.
template <Scalar T>
Model<T> linear_model(const Tensor<T>& weight, bool bias = false) {
	LayerNode<T> n;
	n.kind = LayerKind::Linear;
	n.inputs = {kModelInput};
	n.weight = weight;
	if (bias) n.bias = Tensor<T>({weight.dim(0)});
	return Model<T>("linear", {weight.dim(1)}, weight.dim(0), {n});
}

/// conv(C→F, 3×3, pad 1) → BN → flatten → linear(K) on C×S×S inputs.
template <Scalar T>
Model<T> conv_bn_model(std::size_t C, std::size_t F, std::size_t S, std::size_t K, std::uint64_t seed, bool bias = false) {
	ModelBuilder<T> b("conv_bn", {C, S, S}, K, seed);
	int x = b.batch_norm(b.conv(kModelInput, F, 3, 1, 1, bias));
	b.linear(b.flatten(x), K);
	return std::move(b).build();
}

/// Uniform images in [0, 1) with labels n mod K.
inline Dataset random_dataset(const Shape& example, std::size_t count, std::size_t K, std::uint64_t seed) {
	std::mt19937_64 rng(seed);
	std::uniform_real_distribution<float> u(0.0f, 1.0f);
	Shape s{count};
	s.insert(s.end(), example.begin(), example.end());
	Dataset d;
	d.images = Tensor<float>(s);
	for (auto& v : d.images.data()) v = u(rng);
	for (std::size_t n = 0; n < count; ++n) d.labels.push_back(static_cast<int>(n % K));
	d.num_classes = K;
	return d;
}

}  // namespace fixture

#endif  // CHANPRUNE_TESTS_FIXTURES_HPP_
