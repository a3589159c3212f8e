#ifndef CHANPRUNE_TRAIN_HPP_
#define CHANPRUNE_TRAIN_HPP_

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "data.hpp"
#include "engine.hpp"
#include "errors.hpp"

namespace chanprune {

struct TrainConfig {
	std::size_t epochs = 15;
	std::size_t batch_size = 32;
	double learning_rate = 0.05;
	double momentum = 0.9;
	double weight_decay = 5e-4;
	std::uint64_t seed = 1;  // shuffling
};

struct EpochLog {
	std::size_t epoch = 0;
	double loss = 0;
	double accuracy = 0;  // on the training batches, train-mode forward
};

/// Index of the largest entry; the lowest index wins ties.
template <Scalar T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t n) {
	std::size_t best = 0;
	for (std::size_t k = 1; k < logits.dim(1); ++k)
		if (logits.at(n, k) > logits.at(n, best)) best = k;
	return best;
}

/**
 * Mini-batch SGD with heavy-ball momentum and L2 weight decay on every
 * trainable parameter: v ← μv + (g + λθ), θ ← θ − ηv. Batches are reshuffled
 * each epoch from a stream keyed by (seed, epoch).
 */
template <Scalar T>
std::vector<EpochLog> train(Model<T>& model, const Dataset& data, const TrainConfig& cfg) {
	if (!data.has_labels()) throw InputError("training needs labels");
	if (cfg.batch_size == 0) throw ConfigError("batch_size must be at least 1");
	std::vector<EpochLog> log;
	if (cfg.epochs == 0) return log;

	std::vector<std::vector<Tensor<T>>> velocity(model.size());
	auto params = [](LayerNode<T>& n) {
		return std::vector<std::pair<Tensor<T>*, Tensor<T>*>>{
				{&n.weight, &n.grad_weight}, {&n.bias, &n.grad_bias}, {&n.gamma, &n.grad_gamma}, {&n.beta, &n.grad_beta}};
	};
	for (std::size_t i = 0; i < model.size(); ++i)
		for (auto [p, g] : params(model.node(i))) velocity[i].push_back(Tensor<T>(p->empty() ? Shape{1} : p->shape()));

	const T lr = static_cast<T>(cfg.learning_rate), mu = static_cast<T>(cfg.momentum),
			wd = static_cast<T>(cfg.weight_decay);
	for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
		double loss_sum = 0;
		std::size_t correct = 0;
		for (const auto& idx : batches(data, cfg.batch_size, stream_key(cfg.seed, epoch))) {
			const auto x = data.gather<T>(idx);
			const auto y = data.gather_labels(idx);
			model.zero_grad();
			const auto rec = forward(model, x, Mode::Train);
			const auto lr_res = softmax_cross_entropy(rec.logits(), std::span<const int>(y));
			if (!std::isfinite(lr_res.loss))
				throw TrainingError("non-finite loss in epoch " + std::to_string(epoch));
			loss_sum += lr_res.loss * static_cast<double>(idx.size());
			for (std::size_t n = 0; n < idx.size(); ++n)
				if (static_cast<int>(argmax_row(rec.logits(), n)) == y[n]) ++correct;
			backward(model, rec, lr_res.grad_logits);
			for (std::size_t i = 0; i < model.size(); ++i) {
				auto ps = params(model.node(i));
				for (std::size_t k = 0; k < ps.size(); ++k) {
					auto [p, g] = ps[k];
					auto& v = velocity[i][k];
					for (std::size_t j = 0; j < p->size(); ++j) {
						v[j] = mu * v[j] + ((*g)[j] + wd * (*p)[j]);
						(*p)[j] -= lr * v[j];
					}
				}
			}
		}
		const double m = static_cast<double>(data.size());
		log.push_back({epoch, loss_sum / m, static_cast<double>(correct) / m});
		if (!std::isfinite(log.back().loss)) throw TrainingError("non-finite loss in epoch " + std::to_string(epoch));
	}
	model.zero_grad();
	return log;
}

/// Eval-mode argmax accuracy (BatchNorm running statistics).
template <Scalar T>
double evaluate(const Model<T>& model, const Dataset& data, std::size_t batch_size = 256) {
	if (data.size() == 0) throw InputError("cannot evaluate on an empty dataset");
	if (!data.has_labels()) throw InputError("evaluation needs labels");
	Model<T> work = model;
	std::size_t correct = 0;
	for (const auto& idx : batches(data, batch_size)) {
		const auto rec = forward(work, data.gather<T>(idx), Mode::Eval);
		for (std::size_t n = 0; n < idx.size(); ++n)
			if (static_cast<int>(argmax_row(rec.logits(), n)) == data.labels[idx[n]]) ++correct;
	}
	return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace chanprune

#endif  // CHANPRUNE_TRAIN_HPP_
