#ifndef CHANPRUNE_IMPORTANCE_HPP_
#define CHANPRUNE_IMPORTANCE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "csv.hpp"
#include "data.hpp"
#include "engine.hpp"
#include "errors.hpp"
#include "random.hpp"

namespace chanprune {

// ---------------------------------------------------------------------------
// Names
// ---------------------------------------------------------------------------

/// `Random` is the data-free ranking baseline; the other five read gradients.
enum class Estimator { TaylorFO, TaylorFOAbs, TaylorFOSq, MolchanovBN, MolchanovGroup, Random };

inline std::string_view estimator_name(Estimator e) {
	switch (e) {
	case Estimator::TaylorFO: return "taylorfo";
	case Estimator::TaylorFOAbs: return "taylorfo_abs";
	case Estimator::TaylorFOSq: return "taylorfo_sq";
	case Estimator::MolchanovBN: return "molchanov_bn";
	case Estimator::MolchanovGroup: return "molchanov_group";
	case Estimator::Random: return "random";
	}
	return "?";
}

inline Estimator parse_estimator(std::string_view name) {
	for (auto e : {Estimator::TaylorFO, Estimator::TaylorFOAbs, Estimator::TaylorFOSq, Estimator::MolchanovBN,
			     Estimator::MolchanovGroup, Estimator::Random})
		if (estimator_name(e) == name) return e;
	throw InputError("unknown estimator '" + std::string(name) + "'");
}

/// The five gradient-based estimators.
inline constexpr Estimator kGradientEstimators[] = {Estimator::TaylorFO, Estimator::TaylorFOAbs, Estimator::TaylorFOSq,
		Estimator::MolchanovBN, Estimator::MolchanovGroup};

enum class GradientKind { Loss, Random };

struct GradientSource {
	GradientKind kind = GradientKind::Loss;
	bool normalize = false;
	std::uint64_t seed = 0;  // read only by GradientKind::Random

	std::string_view kind_name() const { return kind == GradientKind::Loss ? "loss" : "random"; }
};

inline GradientKind parse_gradient_kind(std::string_view s) {
	if (s == "loss") return GradientKind::Loss;
	if (s == "random" || s == "rand") return GradientKind::Random;
	throw InputError("unknown gradient source '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Output gradients
// ---------------------------------------------------------------------------

/// Scales each row to unit L2 norm. Rows that are exactly zero stay zero.
template <Scalar T>
void normalize_rows(Tensor<T>& g) {
	const std::size_t N = g.dim(0), K = g.dim(1);
	for (std::size_t n = 0; n < N; ++n) {
		double ss = 0;
		for (std::size_t k = 0; k < K; ++k) ss += static_cast<double>(g.at(n, k)) * static_cast<double>(g.at(n, k));
		if (ss == 0) continue;
		const double inv = 1.0 / std::sqrt(ss);
		for (std::size_t k = 0; k < K; ++k) g.at(n, k) = static_cast<T>(static_cast<double>(g.at(n, k)) * inv);
	}
}

/**
 * Output-layer gradient for a batch whose first row is global example
 * `first_example`. Loss: per-example gradient of the cross-entropy,
 * softmax − onehot (no 1/N, so an example's row does not depend on the batch
 * it lands in). Random: i.i.d. N(0, 1) entries from a stream keyed by
 * (seed, global example index); labels are not read.
 */
template <Scalar T>
Tensor<T> make_output_gradient(const GradientSource& source, const Tensor<T>& logits,
		std::optional<std::span<const int>> labels, std::size_t first_example = 0) {
	if (logits.rank() != 2) throw DimensionError("logits must be N×K, got " + detail::shape_str(logits.shape()));
	const std::size_t N = logits.dim(0), K = logits.dim(1);
	Tensor<T> g(logits.shape());
	if (source.kind == GradientKind::Loss) {
		if (!labels) throw InputError("loss gradient requires labels");
		if (labels->size() != N)
			throw InputError("got " + std::to_string(labels->size()) + " labels for a batch of " + std::to_string(N));
		for (std::size_t n = 0; n < N; ++n) {
			const auto row = softmax_cross_entropy(logits.slice_rows(n, n + 1), labels->subspan(n, 1)).grad_logits;
			for (std::size_t k = 0; k < K; ++k) g.at(n, k) = row[k];
		}
	} else {
		for (std::size_t n = 0; n < N; ++n) {
			auto rng = keyed_engine(source.seed, first_example + n);
			std::normal_distribution<double> nd;
			for (std::size_t k = 0; k < K; ++k) g.at(n, k) = static_cast<T>(nd(rng));
		}
	}
	if (source.normalize) normalize_rows(g);
	return g;
}

// ---------------------------------------------------------------------------
// Per-example signals and accumulation
// ---------------------------------------------------------------------------

/// s[n, c] = Σ over non-batch, non-channel positions of x·δx.
template <Scalar T>
Tensor<double> channel_signal(const Tensor<T>& x, const Tensor<T>& dx) {
	if (x.shape() != dx.shape())
		throw DimensionError("signal shapes differ: " + detail::shape_str(x.shape()) + " vs " +
				detail::shape_str(dx.shape()));
	if (x.rank() < 2) throw DimensionError("site tensors need batch and channel axes, got " + detail::shape_str(x.shape()));
	const std::size_t N = x.dim(0), C = x.dim(1), inner = x.size() / (N * C);
	Tensor<double> s({N, C});
	for (std::size_t n = 0; n < N; ++n)
		for (std::size_t c = 0; c < C; ++c) {
			double acc = 0;
			const std::size_t base = (n * C + c) * inner;
			for (std::size_t j = 0; j < inner; ++j)
				acc += static_cast<double>(x[base + j]) * static_cast<double>(dx[base + j]);
			s.at(n, c) = acc;
		}
	return s;
}

/// Running per-channel sums for one site and one estimator, over M examples.
struct SiteAccumulator {
	std::size_t site_id = 0;
	std::size_t node_index = 0;
	Estimator estimator = Estimator::TaylorFO;
	std::vector<double> acc;
	std::size_t examples = 0;
};

inline SiteAccumulator make_accumulator(const PrunableSite& site, Estimator e) {
	return {site.site_id, site.node, e, std::vector<double>(site.channels, 0.0), 0};
}

/**
 * acc[c] += f(s[n, c]) over the batch, M += batch size. f is the identity for
 * taylorfo, |·| for taylorfo_abs and square for taylorfo_sq. The molchanov
 * estimators square their per-example sums, so they accumulate like
 * taylorfo_sq on their own signal.
 */
inline void accumulate(SiteAccumulator& a, const Tensor<double>& signal, Estimator e) {
	if (e != a.estimator)
		throw StateError("accumulator for site " + std::to_string(a.site_id) + " holds " +
				std::string(estimator_name(a.estimator)) + ", got " + std::string(estimator_name(e)));
	if (e == Estimator::Random) throw StateError("the random baseline does not accumulate signals");
	if (signal.rank() != 2 || signal.dim(1) != a.acc.size())
		throw DimensionError("signal " + detail::shape_str(signal.shape()) + " does not match " +
				std::to_string(a.acc.size()) + " channels");
	const std::size_t N = signal.dim(0), C = signal.dim(1);
	for (std::size_t n = 0; n < N; ++n)
		for (std::size_t c = 0; c < C; ++c) {
			const double s = signal.at(n, c);
			switch (e) {
			case Estimator::TaylorFO: a.acc[c] += s; break;
			case Estimator::TaylorFOAbs: a.acc[c] += std::abs(s); break;
			default: a.acc[c] += s * s; break;
			}
		}
	a.examples += N;
}

/// Adds a partial accumulator (same site and estimator) into `into`.
inline void merge(SiteAccumulator& into, const SiteAccumulator& part) {
	if (into.site_id != part.site_id || into.estimator != part.estimator || into.acc.size() != part.acc.size())
		throw StateError("cannot merge accumulators of different sites or estimators");
	for (std::size_t c = 0; c < into.acc.size(); ++c) into.acc[c] += part.acc[c];
	into.examples += part.examples;
}

// ---------------------------------------------------------------------------
// Table
// ---------------------------------------------------------------------------

struct ImportanceEntry {
	std::size_t site_id = 0;
	std::size_t node_index = 0;
	std::size_t channel = 0;
	double score = 0;

	bool operator==(const ImportanceEntry&) const = default;
};

struct ImportanceTable {
	std::vector<ImportanceEntry> entries;  // site-major, channel-minor
	std::string estimator;
	std::string source;
	bool normalized = false;
	std::size_t data_size = 0;
	std::uint64_t seed = 0;

	std::vector<double> scores() const {
		std::vector<double> s;
		s.reserve(entries.size());
		for (const auto& e : entries) s.push_back(e.score);
		return s;
	}
	bool operator==(const ImportanceTable&) const = default;
};

struct TableMeta {
	std::string estimator;
	std::string source;
	bool normalized = false;
	std::size_t data_size = 0;
	std::uint64_t seed = 0;
};

/// score = acc / M per channel. Throws StateError if any site saw no examples.
inline ImportanceTable finalize(std::span<const SiteAccumulator> sites, const TableMeta& meta) {
	ImportanceTable t{{}, meta.estimator, meta.source, meta.normalized, meta.data_size, meta.seed};
	for (const auto& s : sites) {
		if (s.examples == 0) throw StateError("site " + std::to_string(s.site_id) + " has M = 0");
		const double m = static_cast<double>(s.examples);
		for (std::size_t c = 0; c < s.acc.size(); ++c) t.entries.push_back({s.site_id, s.node_index, c, s.acc[c] / m});
	}
	return t;
}

inline constexpr std::string_view kImportanceCsvHeader =
		"site_id,node_index,channel,score,estimator,source,normalized,data_size,seed";

inline void write_csv(std::ostream& os, const ImportanceTable& t) {
	os << kImportanceCsvHeader << '\n';
	for (const auto& e : t.entries)
		os << e.site_id << ',' << e.node_index << ',' << e.channel << ',' << format_double(e.score) << ','
		   << t.estimator << ',' << t.source << ',' << (t.normalized ? 1 : 0) << ',' << t.data_size << ',' << t.seed
		   << '\n';
}

inline ImportanceTable read_importance_csv(std::istream& in) {
	const auto rows = read_csv_rows(in, kImportanceCsvHeader);
	ImportanceTable t;
	for (std::size_t r = 0; r < rows.size(); ++r) {
		const auto& f = rows[r];
		t.entries.push_back({parse_u64(f[0]), parse_u64(f[1]), parse_u64(f[2]), parse_double(f[3])});
		if (r == 0) {
			t.estimator = f[4];
			t.source = f[5];
			t.normalized = f[6] == "1";
			t.data_size = parse_u64(f[7]);
			t.seed = parse_u64(f[8]);
		} else if (f[4] != t.estimator || f[5] != t.source) {
			throw FormatError("importance CSV mixes estimators or sources", r + 1);
		}
	}
	return t;
}

// ---------------------------------------------------------------------------
// Molchanov baselines on explicit per-example gradients
// ---------------------------------------------------------------------------

template <Scalar T>
struct BnGradSample {
	Tensor<T> grad_gamma, grad_beta;
};

template <Scalar T>
struct GroupGradSample {
	Tensor<T> grad_weight, grad_bias;  // grad_bias empty when the layer has none
};

/// score[c] = (1/M) Σ_n (γ_c·δγ_c(n) + β_c·δβ_c(n))², one sample per example.
template <Scalar T>
std::vector<double> molchanov_bn_score(const LayerNode<T>& bn, std::span<const BnGradSample<T>> samples) {
	if (bn.kind != LayerKind::BatchNorm)
		throw InputError("molchanov_bn_score needs a batchnorm node, got " + std::string(kind_name(bn.kind)));
	if (samples.empty()) throw StateError("molchanov_bn_score needs at least one example");
	const std::size_t C = bn.gamma.size();
	std::vector<double> score(C, 0.0);
	for (const auto& s : samples) {
		if (s.grad_gamma.size() != C || s.grad_beta.size() != C)
			throw DimensionError("batchnorm gradient sample does not match " + std::to_string(C) + " channels");
		for (std::size_t c = 0; c < C; ++c) {
			const double g = static_cast<double>(bn.gamma[c]) * static_cast<double>(s.grad_gamma[c]) +
					static_cast<double>(bn.beta[c]) * static_cast<double>(s.grad_beta[c]);
			score[c] += g * g;
		}
	}
	for (auto& v : score) v /= static_cast<double>(samples.size());
	return score;
}

/// score[c] = (1/M) Σ_n (Σ over weights and bias of output channel c of w·δw(n))².
template <Scalar T>
std::vector<double> molchanov_group_score(const LayerNode<T>& node, std::span<const GroupGradSample<T>> samples) {
	if (!node.has_weight())
		throw InputError("molchanov_group_score needs a conv2d or linear node, got " + std::string(kind_name(node.kind)));
	if (samples.empty()) throw StateError("molchanov_group_score needs at least one example");
	const std::size_t F = node.weight.dim(0), per = node.weight.size() / F;
	std::vector<double> score(F, 0.0);
	for (const auto& s : samples) {
		if (s.grad_weight.shape() != node.weight.shape() || (node.has_bias() && s.grad_bias.size() != F))
			throw DimensionError("weight gradient sample does not match layer parameters");
		for (std::size_t f = 0; f < F; ++f) {
			double g = 0;
			for (std::size_t k = 0; k < per; ++k)
				g += static_cast<double>(node.weight[f * per + k]) * static_cast<double>(s.grad_weight[f * per + k]);
			if (node.has_bias()) g += static_cast<double>(node.bias[f]) * static_cast<double>(s.grad_bias[f]);
			score[f] += g * g;
		}
	}
	for (auto& v : score) v /= static_cast<double>(samples.size());
	return score;
}

// ---------------------------------------------------------------------------
// Streaming estimation over a model
// ---------------------------------------------------------------------------

namespace detail {

/// The BatchNorm node reading site node `i` directly, if any.
template <Scalar T>
std::optional<std::size_t> following_bn(const Model<T>& model, std::size_t i) {
	for (std::size_t j = i + 1; j < model.size(); ++j) {
		const auto& n = model.node(j);
		if (n.kind == LayerKind::BatchNorm && n.inputs[0] == static_cast<int>(i)) return j;
	}
	return std::nullopt;
}

// g[n, c] = γ_c·δγ_c(n) + β_c·δβ_c(n), with δγ_c(n) = Σ_pos dy·x̂ and
// δβ_c(n) = Σ_pos dy restricted to example n.
template <Scalar T>
Tensor<double> bn_signal(const LayerNode<T>& bn, const Tensor<T>& xhat, const Tensor<T>& dy) {
	const std::size_t N = dy.dim(0), C = dy.dim(1), inner = dy.size() / (N * C);
	Tensor<double> s({N, C});
	for (std::size_t n = 0; n < N; ++n)
		for (std::size_t c = 0; c < C; ++c) {
			double dg = 0, db = 0;
			const std::size_t base = (n * C + c) * inner;
			for (std::size_t j = 0; j < inner; ++j) {
				dg += static_cast<double>(dy[base + j]) * static_cast<double>(xhat[base + j]);
				db += static_cast<double>(dy[base + j]);
			}
			s.at(n, c) = static_cast<double>(bn.gamma[c]) * dg + static_cast<double>(bn.beta[c]) * db;
		}
	return s;
}

// Σ_w w·δw(n) + b·δb(n) per example and output channel, with δw(n) formed
// explicitly from example n's layer input and output gradient.
template <Scalar T>
Tensor<double> group_signal(const LayerNode<T>& node, const Tensor<T>& x, const Tensor<T>& dy) {
	const std::size_t N = dy.dim(0), F = dy.dim(1);
	Tensor<double> s({N, F});
	if (node.kind == LayerKind::Linear) {
		const std::size_t I = x.dim(1);
		for (std::size_t n = 0; n < N; ++n)
			for (std::size_t f = 0; f < F; ++f) {
				const double d = dy.at(n, f);
				double g = 0;
				for (std::size_t k = 0; k < I; ++k) g += static_cast<double>(node.weight.at(f, k)) * (d * x.at(n, k));
				if (node.has_bias()) g += static_cast<double>(node.bias[f]) * d;
				s.at(n, f) = g;
			}
		return s;
	}
	const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
	const std::size_t KH = node.weight.dim(2), KW = node.weight.dim(3);
	const std::size_t OH = dy.dim(2), OW = dy.dim(3), st = node.conv.stride;
	const long pad = static_cast<long>(node.conv.padding);
	std::vector<double> dw(C * KH * KW);
	for (std::size_t n = 0; n < N; ++n)
		for (std::size_t f = 0; f < F; ++f) {
			std::fill(dw.begin(), dw.end(), 0.0);
			double db = 0;
			for (std::size_t oh = 0; oh < OH; ++oh)
				for (std::size_t ow = 0; ow < OW; ++ow) {
					const double d = dy.at(n, f, oh, ow);
					if (d == 0) continue;
					db += d;
					for (std::size_t c = 0; c < C; ++c)
						for (std::size_t i = 0; i < KH; ++i) {
							const long h = static_cast<long>(oh * st + i) - pad;
							if (h < 0 || h >= static_cast<long>(H)) continue;
							for (std::size_t j = 0; j < KW; ++j) {
								const long w = static_cast<long>(ow * st + j) - pad;
								if (w < 0 || w >= static_cast<long>(W)) continue;
								dw[(c * KH + i) * KW + j] +=
										d * static_cast<double>(x.at(n, c, static_cast<std::size_t>(h), static_cast<std::size_t>(w)));
							}
						}
				}
			double g = 0;
			const T* wf = node.weight.data().data() + f * dw.size();
			for (std::size_t k = 0; k < dw.size(); ++k) g += static_cast<double>(wf[k]) * dw[k];
			if (node.has_bias()) g += static_cast<double>(node.bias[f]) * db;
			s.at(n, f) = g;
		}
	return s;
}

template <Scalar T>
Tensor<double> estimator_signal(const Model<T>& model, const ForwardRecord<T>& rec, const SiteGradients<T>& g,
		const PrunableSite& site, Estimator e) {
	Tensor<double> s;
	switch (e) {
	case Estimator::MolchanovBN: {
		const auto b = following_bn(model, site.node);
		s = bn_signal(model.node(*b), rec.normalized[*b], g.node_grads[*b]);
		break;
	}
	case Estimator::MolchanovGroup: {
		const auto& node = model.node(site.node);
		const int in = node.inputs[0];
		s = group_signal(node, in == kModelInput ? rec.input : rec.outputs[static_cast<std::size_t>(in)],
				g.node_grads[site.node]);
		break;
	}
	default:
		s = channel_signal(rec.outputs[site.node], g.node_grads[site.node]);
		break;
	}
	const auto& keep = model.masks()[site.site_id];
	if (!keep.empty())
		for (std::size_t n = 0; n < s.dim(0); ++n)
			for (std::size_t c = 0; c < s.dim(1); ++c)
				if (!keep[c]) s.at(n, c) = 0.0;
	return s;
}

inline TableMeta table_meta(Estimator e, const GradientSource& src, std::size_t data_size) {
	if (e == Estimator::Random) return {std::string(estimator_name(e)), "none", false, data_size, src.seed};
	return {std::string(estimator_name(e)), std::string(src.kind_name()), src.normalize, data_size,
			src.kind == GradientKind::Random ? src.seed : 0};
}

}  // namespace detail

/// Data-free baseline: uniform scores keyed by (seed, site, channel).
template <Scalar T>
ImportanceTable random_ranking(const Model<T>& model, std::uint64_t seed, std::size_t data_size = 0) {
	ImportanceTable t{{}, "random", "none", false, data_size, seed};
	for (const auto& s : model.sites())
		for (std::size_t c = 0; c < s.channels; ++c) {
			auto rng = keyed_engine(seed, s.site_id, c);
			t.entries.push_back({s.site_id, s.node, c, std::uniform_real_distribution<double>(0.0, 1.0)(rng)});
		}
	return t;
}

struct EstimateOptions {
	std::size_t data_size = 0;  // D; the first D examples are used
	std::size_t batch_size = 32;
};

/**
 * Streams the first D examples through eval-mode forward and backward passes
 * with the given gradient source and returns one table per estimator, all
 * computed from the same passes. Eval mode makes every example's signal
 * independent of the others in its batch. Labels are read only for the
 * loss source.
 */
template <Scalar T>
std::vector<ImportanceTable> estimate_many(const Model<T>& model, const Dataset& data, std::span<const Estimator> estimators,
		const GradientSource& source, const EstimateOptions& opt) {
	const std::size_t D = opt.data_size;
	if (D == 0 || D > data.size())
		throw InputError("data size D = " + std::to_string(D) + " outside [1, " + std::to_string(data.size()) + "]");
	if (opt.batch_size == 0) throw InputError("batch size must be at least 1");
	if (model.sites().empty()) throw CapabilityError("model '" + model.name() + "' has no prunable sites");
	for (auto e : estimators)
		if (e == Estimator::MolchanovBN)
			for (const auto& s : model.sites())
				if (!detail::following_bn(model, s.node))
					throw CapabilityError("molchanov_bn needs a batchnorm after site " + std::to_string(s.site_id) +
							" (node " + std::to_string(s.node) + ")");
	const bool uses_labels = source.kind == GradientKind::Loss;
	if (uses_labels && !data.has_labels()) throw InputError("the loss gradient source needs labels");

	std::vector<Estimator> streamed;
	for (auto e : estimators)
		if (e != Estimator::Random && std::find(streamed.begin(), streamed.end(), e) == streamed.end())
			streamed.push_back(e);

	std::vector<std::vector<SiteAccumulator>> acc(streamed.size());
	for (std::size_t k = 0; k < streamed.size(); ++k)
		for (const auto& s : model.sites()) acc[k].push_back(make_accumulator(s, streamed[k]));

	if (!streamed.empty()) {
		Model<T> work = model;
		for (const auto& idx : batches(D, opt.batch_size)) {
			const Tensor<T> x = data.gather<T>(idx);
			const auto rec = forward(work, x, Mode::Eval);
			std::optional<std::vector<int>> labels;
			if (uses_labels) labels = data.gather_labels(idx);
			const Tensor<T> grad = make_output_gradient<T>(source, rec.logits(),
					labels ? std::optional<std::span<const int>>(*labels) : std::nullopt, idx.front());
			const auto g = backward(work, rec, grad);
			for (std::size_t k = 0; k < streamed.size(); ++k)
				for (const auto& s : work.sites())
					accumulate(acc[k][s.site_id], detail::estimator_signal(work, rec, g, s, streamed[k]), streamed[k]);
		}
	}

	std::vector<ImportanceTable> out;
	for (auto e : estimators) {
		if (e == Estimator::Random) {
			out.push_back(random_ranking(model, source.seed, D));
			continue;
		}
		const std::size_t k = static_cast<std::size_t>(std::find(streamed.begin(), streamed.end(), e) - streamed.begin());
		out.push_back(finalize(acc[k], detail::table_meta(e, source, D)));
	}
	return out;
}

template <Scalar T>
ImportanceTable estimate(const Model<T>& model, const Dataset& data, Estimator estimator, const GradientSource& source,
		const EstimateOptions& opt) {
	const Estimator one[] = {estimator};
	return std::move(estimate_many(model, data, one, source, opt).front());
}

}  // namespace chanprune

#endif  // CHANPRUNE_IMPORTANCE_HPP_
