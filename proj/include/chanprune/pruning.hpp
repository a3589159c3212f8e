#ifndef CHANPRUNE_PRUNING_HPP_
#define CHANPRUNE_PRUNING_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "csv.hpp"
#include "engine.hpp"
#include "errors.hpp"
#include "importance.hpp"
#include "random.hpp"

namespace chanprune {

/// Per-site keep flags (1 = keep), indexed by site id.
using PruneMask = std::vector<std::vector<std::uint8_t>>;

struct RankedChannel {
	std::size_t site_id = 0;
	std::size_t node_index = 0;
	std::size_t channel = 0;
	double score = 0;
	bool pruned = false;

	bool operator==(const RankedChannel&) const = default;
};

struct PrunePlan {
	std::vector<RankedChannel> ranking;  // ascending score, ties by (node, channel)
	std::size_t prune_count = 0;
	/// Candidates passed over because pruning them would empty their site.
	std::vector<RankedChannel> skipped;
	PruneMask mask;

	bool operator==(const PrunePlan&) const = default;
};

struct RankOptions {
	/// Divide each site's scores by the site's largest |score| before ranking.
	bool per_layer_normalize = false;
};

/**
 * Global ascending sort of all channels; the P lowest are pruned, except that
 * a candidate whose removal would leave its site empty is skipped and
 * recorded, and the next candidate is taken.
 */
inline PrunePlan rank_global(const ImportanceTable& table, std::size_t P, const RankOptions& opt = {}) {
	std::map<std::size_t, std::size_t> site_channels;
	std::map<std::size_t, double> site_max;
	for (const auto& e : table.entries) {
		if (!std::isfinite(e.score))
			throw InputError("non-finite score at site " + std::to_string(e.site_id) + " channel " + std::to_string(e.channel));
		site_channels[e.site_id] = std::max(site_channels[e.site_id], e.channel + 1);
		site_max[e.site_id] = std::max(site_max[e.site_id], std::abs(e.score));
	}
	const std::size_t sites = site_channels.empty() ? 0 : site_channels.rbegin()->first + 1;
	if (site_channels.size() != sites) throw InputError("importance table skips a site id");
	PrunePlan plan;
	plan.mask.resize(sites);
	std::size_t N = 0;
	for (const auto& [s, c] : site_channels) {
		plan.mask[s].assign(c, 0);
		N += c;
	}
	for (const auto& e : table.entries) {
		if (plan.mask[e.site_id][e.channel]) throw InputError("importance table lists a channel twice");
		plan.mask[e.site_id][e.channel] = 1;
	}
	if (table.entries.size() != N) throw InputError("importance table is missing channels");
	if (P > N - sites)
		throw InputError("prune count " + std::to_string(P) + " outside [0, " + std::to_string(N - sites) + "]");

	for (const auto& e : table.entries) {
		double score = e.score;
		if (opt.per_layer_normalize && site_max[e.site_id] > 0) score /= site_max[e.site_id];
		plan.ranking.push_back({e.site_id, e.node_index, e.channel, score, false});
	}
	std::sort(plan.ranking.begin(), plan.ranking.end(), [](const RankedChannel& a, const RankedChannel& b) {
		if (a.score != b.score) return a.score < b.score;
		if (a.node_index != b.node_index) return a.node_index < b.node_index;
		return a.channel < b.channel;
	});

	std::vector<std::size_t> remaining(sites);
	for (const auto& [s, c] : site_channels) remaining[s] = c;
	for (auto& r : plan.ranking) {
		if (plan.prune_count == P) break;
		if (remaining[r.site_id] == 1) {
			plan.skipped.push_back(r);
			continue;
		}
		r.pruned = true;
		plan.mask[r.site_id][r.channel] = 0;
		--remaining[r.site_id];
		++plan.prune_count;
	}
	return plan;
}

inline constexpr std::string_view kPlanCsvHeader = "rank,site_id,node_index,channel,score,pruned";

inline void write_csv(std::ostream& os, const PrunePlan& plan) {
	os << kPlanCsvHeader << '\n';
	for (std::size_t i = 0; i < plan.ranking.size(); ++i) {
		const auto& r = plan.ranking[i];
		os << i << ',' << r.site_id << ',' << r.node_index << ',' << r.channel << ',' << format_double(r.score) << ','
		   << (r.pruned ? 1 : 0) << '\n';
	}
}

/// Copy of `model` with the mask installed; pruned channels output exact zeros.
template <Scalar T>
Model<T> apply_mask(const Model<T>& model, const PruneMask& mask) {
	Model<T> out = model;
	out.set_masks(mask);
	return out;
}

template <Scalar T>
PruneMask all_keep_mask(const Model<T>& model) {
	PruneMask m;
	for (const auto& s : model.sites()) m.emplace_back(s.channels, 1);
	return m;
}

namespace detail {

inline std::vector<std::size_t> kept_indices(const std::vector<std::uint8_t>& keep) {
	std::vector<std::size_t> idx;
	for (std::size_t c = 0; c < keep.size(); ++c)
		if (keep[c]) idx.push_back(c);
	return idx;
}

// Keeps the listed slices along `axis`.
template <Scalar T>
Tensor<T> select_axis(const Tensor<T>& t, std::size_t axis, const std::vector<std::size_t>& keep) {
	Shape s = t.shape();
	std::size_t outer = 1, inner = 1;
	for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
	for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
	const std::size_t extent = s[axis];
	s[axis] = keep.size();
	std::vector<T> out;
	out.reserve(outer * keep.size() * inner);
	for (std::size_t o = 0; o < outer; ++o)
		for (std::size_t k : keep) {
			const auto b = t.data().begin() + static_cast<std::ptrdiff_t>((o * extent + k) * inner);
			out.insert(out.end(), b, b + static_cast<std::ptrdiff_t>(inner));
		}
	return Tensor<T>(std::move(s), std::move(out));
}

}  // namespace detail

/**
 * Physically removes pruned channels: rows of the site layer's weight and
 * bias, the matching BatchNorm entries (running statistics carried over
 * unchanged), and the matching input slices of every downstream conv or
 * linear consumer, following the channel through ReLU, pooling and flatten.
 */
template <Scalar T>
Model<T> compact(const Model<T>& model, const PruneMask& mask) {
	if (mask.size() != model.sites().size())
		throw InputError("mask has " + std::to_string(mask.size()) + " sites, model has " +
				std::to_string(model.sites().size()));
	std::vector<std::vector<std::size_t>> consumers(model.size());
	for (std::size_t i = 0; i < model.size(); ++i)
		for (int r : model.node(i).inputs)
			if (r >= 0) consumers[static_cast<std::size_t>(r)].push_back(i);

	std::vector<LayerNode<T>> nodes = model.nodes();
	for (const auto& site : model.sites()) {
		const auto& keep = mask[site.site_id];
		if (keep.size() != site.channels)
			throw InputError("mask for site " + std::to_string(site.site_id) + " has " + std::to_string(keep.size()) +
					" channels, site has " + std::to_string(site.channels));
		const auto kept = detail::kept_indices(keep);
		if (kept.empty()) throw InputError("mask empties site " + std::to_string(site.site_id));
		if (kept.size() == site.channels) continue;

		auto& producer = nodes[site.node];
		producer.weight = detail::select_axis(producer.weight, 0, kept);
		if (producer.has_bias()) producer.bias = detail::select_axis(producer.bias, 0, kept);

		// Walk the channel's path; `inner` is the per-channel feature count
		// once a flatten has merged channel and spatial axes.
		struct Step {
			std::size_t node;
			std::size_t inner;
		};
		std::vector<Step> frontier{{site.node, 0}};
		while (!frontier.empty()) {
			const Step cur = frontier.back();
			frontier.pop_back();
			for (std::size_t c : consumers[cur.node]) {
				auto& n = nodes[c];
				switch (n.kind) {
				case LayerKind::BatchNorm:
					for (Tensor<T>* p : {&n.gamma, &n.beta, &n.running_mean, &n.running_var}) *p = detail::select_axis(*p, 0, kept);
					frontier.push_back({c, cur.inner});
					break;
				case LayerKind::ReLU:
				case LayerKind::AvgPool:
				case LayerKind::MaxPool:
					frontier.push_back({c, cur.inner});
					break;
				case LayerKind::Flatten: {
					const Shape& s = model.shapes()[cur.node];
					frontier.push_back({c, shape_volume(s) / s[0]});
					break;
				}
				case LayerKind::Conv2d:
					n.weight = detail::select_axis(n.weight, 1, kept);
					break;
				case LayerKind::Linear:
					if (cur.inner == 0) {
						n.weight = detail::select_axis(n.weight, 1, kept);
					} else {
						const std::size_t out = n.weight.dim(0), in = n.weight.dim(1);
						n.weight = detail::select_axis(n.weight.reshaped({out, in / cur.inner, cur.inner}), 1, kept)
								.reshaped({out, kept.size() * cur.inner});
					}
					break;
				case LayerKind::ResidualAdd:
					throw CapabilityError("cannot compact channels of site " + std::to_string(site.site_id) +
							": they reach " + detail::node_tag(c, n.kind));
				}
			}
		}
	}
	for (auto& n : nodes) n.zero_grad();
	return Model<T>(model.name(), model.input_shape(), model.num_classes(), std::move(nodes));
}

/// Deterministic uniform [0, 1) inputs for equivalence trials.
template <Scalar T>
Tensor<T> random_inputs(const Shape& example_shape, std::size_t count, std::uint64_t seed) {
	Shape s{count};
	s.insert(s.end(), example_shape.begin(), example_shape.end());
	Tensor<T> x(std::move(s));
	auto rng = keyed_engine(seed, 0xE0);
	std::uniform_real_distribution<double> u(0.0, 1.0);
	for (auto& v : x.data()) v = static_cast<T>(u(rng));
	return x;
}

/// Max |logit difference| between two models over `trials` random inputs.
template <Scalar T>
double max_logit_deviation(const Model<T>& a, const Model<T>& b, std::size_t trials, std::uint64_t seed = 1) {
	if (a.input_shape() != b.input_shape() || a.num_classes() != b.num_classes())
		throw DimensionError("models have different input or output signatures");
	double worst = 0;
	constexpr std::size_t kChunk = 25;
	for (std::size_t start = 0; start < trials; start += kChunk) {
		const std::size_t n = std::min(kChunk, trials - start);
		const auto x = random_inputs<T>(a.input_shape(), n, stream_key(seed, start));
		const auto la = infer(a, x), lb = infer(b, x);
		for (std::size_t k = 0; k < la.size(); ++k)
			worst = std::max(worst, std::abs(static_cast<double>(la[k]) - static_cast<double>(lb[k])));
	}
	return worst;
}

/// Masked versus compacted logits over `trials` random inputs.
template <Scalar T>
double validate_equivalence(const Model<T>& model, const PruneMask& mask, std::size_t trials, std::uint64_t seed = 1) {
	return max_logit_deviation(apply_mask(model, mask), compact(model, mask), trials, seed);
}

}  // namespace chanprune

#endif  // CHANPRUNE_PRUNING_HPP_
