#ifndef CHANPRUNE_EXPERIMENT_HPP_
#define CHANPRUNE_EXPERIMENT_HPP_

#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "csv.hpp"
#include "data.hpp"
#include "importance.hpp"
#include "pruning.hpp"
#include "train.hpp"

namespace chanprune {

/// One ranking method: estimator plus gradient source. Text form
/// `estimator[/loss|/random][/norm]`, e.g. `taylorfo_sq/random/norm`.
struct MethodSpec {
	Estimator estimator = Estimator::TaylorFOSq;
	GradientKind source = GradientKind::Loss;
	bool normalize = false;

	bool operator==(const MethodSpec&) const = default;
};

inline MethodSpec parse_method(std::string_view text) {
	const auto parts = split_fields(text, '/');
	MethodSpec m;
	m.estimator = parse_estimator(parts[0]);
	for (std::size_t i = 1; i < parts.size(); ++i) {
		if (parts[i] == "norm")
			m.normalize = true;
		else
			m.source = parse_gradient_kind(parts[i]);
	}
	return m;
}

inline std::string method_text(const MethodSpec& m) {
	std::string s(estimator_name(m.estimator));
	if (m.estimator == Estimator::Random) return s;
	s += m.source == GradientKind::Loss ? "/loss" : "/random";
	if (m.normalize) s += "/norm";
	return s;
}

struct SweepConfig {
	std::vector<MethodSpec> methods;
	std::vector<std::size_t> data_sizes;    // 0 means the full training set
	std::vector<std::size_t> prune_counts;  // P values; 0 entries are ignored (baseline is always emitted)
	std::vector<std::uint64_t> seeds{1};
	std::size_t importance_batch_size = 64;
	std::size_t eval_batch_size = 256;
	bool per_layer_normalize = false;
	std::size_t finetune_epochs = 0;
	TrainConfig finetune;  // used only when finetune_epochs > 0
};

/// round(f·N) for each fraction.
inline std::vector<std::size_t> counts_from_fractions(const std::vector<double>& fractions, std::size_t N) {
	std::vector<std::size_t> out;
	for (double f : fractions) {
		if (!(f >= 0 && f <= 1)) throw ConfigError("prune fraction " + format_double(f) + " outside [0, 1]");
		out.push_back(static_cast<std::size_t>(std::llround(f * static_cast<double>(N))));
	}
	return out;
}

/// Ten evenly spaced fractions from 0 to 70% of N.
inline std::vector<double> default_prune_fractions() {
	std::vector<double> f;
	for (int k = 0; k < 10; ++k) f.push_back(0.7 * k / 9.0);
	return f;
}

struct SweepRow {
	std::string estimator;
	std::string source;
	bool normalized = false;
	std::size_t data_size = 0;
	std::size_t pruned_count = 0;
	double pruned_fraction = 0;
	double test_accuracy = 0;
	std::uint64_t seed = 0;

	bool operator==(const SweepRow&) const = default;
};

inline constexpr std::string_view kSweepCsvHeader =
		"estimator,source,normalized,data_size,pruned_count,pruned_fraction,test_accuracy,seed";

inline void write_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
	os << kSweepCsvHeader << '\n';
	for (const auto& r : rows)
		os << r.estimator << ',' << r.source << ',' << (r.normalized ? 1 : 0) << ',' << r.data_size << ','
		   << r.pruned_count << ',' << format_double(r.pruned_fraction) << ',' << format_double(r.test_accuracy) << ','
		   << r.seed << '\n';
}

/**
 * For each (method, D, seed): estimate importance once on the first D
 * training examples, then for P = 0 and every configured P rank, mask and
 * measure test accuracy on the masked model. Tables that share a gradient
 * source, D and seed come from the same passes. Rows follow grid order.
 */
template <Scalar T>
std::vector<SweepRow> prune_sweep(const Model<T>& model, const Dataset& train_set, const Dataset& test_set,
		const SweepConfig& cfg) {
	const std::size_t N = model.total_prunable_channels();
	const std::size_t max_p = N - model.sites().size();
	for (auto p : cfg.prune_counts)
		if (p > max_p)
			throw ConfigError("prune count " + std::to_string(p) + " exceeds " + std::to_string(max_p) +
					" (N minus one survivor per site)");
	std::vector<std::size_t> Ds;
	for (auto d : cfg.data_sizes) {
		const std::size_t D = d == 0 ? train_set.size() : d;
		if (D > train_set.size())
			throw ConfigError("data size " + std::to_string(D) + " exceeds the training set (" +
					std::to_string(train_set.size()) + ")");
		Ds.push_back(D);
	}

	const double base_acc = evaluate(model, test_set, cfg.eval_batch_size);

	// (source, normalize, D, seed) → estimator → table
	using Key = std::tuple<int, bool, std::size_t, std::uint64_t>;
	std::map<Key, std::map<Estimator, ImportanceTable>> tables;
	for (std::size_t D : Ds)
		for (auto seed : cfg.seeds) {
			std::map<std::pair<int, bool>, std::vector<Estimator>> groups;
			for (const auto& m : cfg.methods) {
				const auto key = m.estimator == Estimator::Random ? std::pair{-1, false}
				                                                   : std::pair{static_cast<int>(m.source), m.normalize};
				groups[key].push_back(m.estimator);
			}
			for (const auto& [key, ests] : groups) {
				// The data-free baseline (key −1) must not demand labels.
				GradientSource src{key.first == static_cast<int>(GradientKind::Loss) ? GradientKind::Loss
				                                                                     : GradientKind::Random,
						key.second, seed};
				auto out = estimate_many(model, train_set, ests, src, {D, cfg.importance_batch_size});
				for (std::size_t k = 0; k < ests.size(); ++k)
					tables[{key.first, key.second, D, seed}][ests[k]] = std::move(out[k]);
			}
		}

	std::vector<SweepRow> rows;
	for (const auto& m : cfg.methods)
		for (std::size_t D : Ds)
			for (auto seed : cfg.seeds) {
				const int src_key = m.estimator == Estimator::Random ? -1 : static_cast<int>(m.source);
				const bool norm = m.estimator != Estimator::Random && m.normalize;
				const auto& table = tables.at({src_key, norm, D, seed}).at(m.estimator);
				auto row = [&](std::size_t P, double acc) {
					return SweepRow{table.estimator, table.source, table.normalized, D, P,
							static_cast<double>(P) / static_cast<double>(N), acc, seed};
				};
				rows.push_back(row(0, base_acc));
				for (std::size_t P : cfg.prune_counts) {
					if (P == 0) continue;
					const auto plan = rank_global(table, P, {cfg.per_layer_normalize});
					Model<T> pruned = apply_mask(model, plan.mask);
					if (cfg.finetune_epochs > 0) {
						TrainConfig ft = cfg.finetune;
						ft.epochs = cfg.finetune_epochs;
						ft.seed = seed;
						train(pruned, train_set, ft);
					}
					rows.push_back(row(P, evaluate(pruned, test_set, cfg.eval_batch_size)));
				}
			}
	return rows;
}

}  // namespace chanprune

#endif  // CHANPRUNE_EXPERIMENT_HPP_
