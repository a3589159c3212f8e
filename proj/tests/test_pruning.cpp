#include <gtest/gtest.h>

#include <cstring>
#include <random>
#include <sstream>

#include <chanprune/chanprune.hpp>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace chanprune;

namespace {

ImportanceTable table_of(const std::vector<std::vector<double>>& per_site) {
	ImportanceTable t;
	for (std::size_t s = 0; s < per_site.size(); ++s)
		for (std::size_t c = 0; c < per_site[s].size(); ++c) t.entries.push_back({s, 10 * s, c, per_site[s][c]});
	return t;
}

std::vector<std::pair<std::size_t, std::size_t>> pruned_set(const PrunePlan& p) {
	std::vector<std::pair<std::size_t, std::size_t>> out;
	for (std::size_t s = 0; s < p.mask.size(); ++s)
		for (std::size_t c = 0; c < p.mask[s].size(); ++c)
			if (!p.mask[s][c]) out.emplace_back(s, c);
	return out;
}

template <Scalar T>
Model<T> reference(const std::string& name, std::uint64_t seed) {
	ReferenceConfig cfg;
	cfg.seed = seed;
	auto m = make_reference_model<T>(name, cfg);
	fixture::randomize_batchnorm(m, seed + 7);
	return m;
}

template <Scalar T>
PruneMask random_mask(const Model<T>& m, std::mt19937_64& rng) {
	PruneMask mask;
	std::bernoulli_distribution keep(0.5);
	for (const auto& s : m.sites()) {
		std::vector<std::uint8_t> k(s.channels);
		for (auto& v : k) v = keep(rng);
		k[std::uniform_int_distribution<std::size_t>(0, s.channels - 1)(rng)] = 1;
		mask.push_back(std::move(k));
	}
	return mask;
}

template <Scalar T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
	return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

// x(2) → linear(2, no bias) → linear(2, no bias)
Model<double> two_by_two() {
	LayerNode<double> hidden, out;
	hidden.kind = out.kind = LayerKind::Linear;
	hidden.inputs = {kModelInput};
	hidden.weight = Tensor<double>({2, 2}, {1, 2, 3, 4});
	out.inputs = {0};
	out.weight = Tensor<double>({2, 2}, {1, 1, 2, -1});
	return Model<double>("two_by_two", {2}, 2, {hidden, out});
}

}  // namespace

// --- rank_global ------------------------------------------------------------

TEST(RankGlobal, PrunesLowestScores) {
	const auto t = table_of({{0.1, 0.5, 0.2}});
	EXPECT_EQ(pruned_set(rank_global(t, 1)), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}}));
	EXPECT_EQ(pruned_set(rank_global(t, 2)), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {0, 2}}));
	EXPECT_TRUE(pruned_set(rank_global(t, 0)).empty());
}

TEST(RankGlobal, TiesBreakByNodeThenChannel) {
	const auto t = table_of({{1, 1, 1}, {1, 1}});
	const auto p = rank_global(t, 1);
	EXPECT_EQ(pruned_set(p), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}}));
	for (std::size_t i = 0; i < p.ranking.size(); ++i) {
		const std::size_t want_site = i < 3 ? 0 : 1, want_channel = i < 3 ? i : i - 3;
		EXPECT_EQ(p.ranking[i].site_id, want_site);
		EXPECT_EQ(p.ranking[i].channel, want_channel);
	}
}

TEST(RankGlobal, KeepsOneChannelPerSiteAndRecordsSkips) {
	const auto t = table_of({{0.01, 0.02}, {0.5, 0.9, 0.7}});
	const auto p = rank_global(t, 2);
	EXPECT_EQ(p.prune_count, 2u);
	EXPECT_EQ(pruned_set(p), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 0}}));
	ASSERT_EQ(p.skipped.size(), 1u);
	EXPECT_EQ(p.skipped[0].site_id, 0u);
	EXPECT_EQ(p.skipped[0].channel, 1u);
}

TEST(RankGlobal, RejectsOutOfRangeCountAndBadTables) {
	const auto t = table_of({{0.1, 0.2}, {0.3, 0.4}});
	EXPECT_NO_THROW(rank_global(t, 2));
	EXPECT_THROW(rank_global(t, 3), InputError);
	auto nan = t;
	nan.entries[1].score = std::nan("");
	EXPECT_THROW(rank_global(nan, 1), InputError);
	auto dup = t;
	dup.entries[1].channel = 0;
	EXPECT_THROW(rank_global(dup, 1), InputError);
}

TEST(RankGlobal, PlansNestAsCountGrows) {
	std::mt19937_64 rng(3);
	std::uniform_real_distribution<double> u(-1, 1);
	std::vector<std::vector<double>> scores{std::vector<double>(7), std::vector<double>(4), std::vector<double>(9)};
	for (auto& s : scores)
		for (auto& v : s) v = u(rng);
	scores[1][2] = scores[2][5];  // one cross-site tie
	const auto t = table_of(scores);
	for (std::size_t P = 0; P < 17; ++P) {
		const auto a = rank_global(t, P), b = rank_global(t, P + 1);
		EXPECT_EQ(a.prune_count, P);
		for (std::size_t s = 0; s < a.mask.size(); ++s)
			for (std::size_t c = 0; c < a.mask[s].size(); ++c)
				if (!a.mask[s][c]) {
					EXPECT_FALSE(b.mask[s][c]) << "P " << P;
				}
	}
}

TEST(RankGlobal, IsDeterministic) {
	const auto t = table_of({{0.3, 0.3, 0.1}, {0.1, 0.2}});
	EXPECT_EQ(rank_global(t, 2), rank_global(t, 2));
}

TEST(RankGlobal, PerLayerNormalizeRescalesEachSite) {
	// Raw: site 1 is globally smaller. After dividing by each site's max,
	// site 0 channel 0 (0.1 / 1) is lowest.
	const auto t = table_of({{0.1, 1.0}, {0.005, 0.01}});
	EXPECT_EQ(pruned_set(rank_global(t, 1)), (std::vector<std::pair<std::size_t, std::size_t>>{{1, 0}}));
	EXPECT_EQ(pruned_set(rank_global(t, 1, {true})), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}}));
}

TEST(RankGlobal, PlanCsvListsEveryChannel) {
	std::ostringstream os;
	write_csv(os, rank_global(table_of({{0.2, 0.1}}), 1));
	EXPECT_EQ(os.str(), "rank,site_id,node_index,channel,score,pruned\n0,0,0,1,0.1,1\n1,0,0,0,0.2,0\n");
}

// --- apply_mask -------------------------------------------------------------

TEST(ApplyMask, AllKeepIsBitwiseIdentity) {
	for (const auto& name : reference_model_names()) {
		const auto m = reference<double>(name, 2);
		const auto x = random_inputs<double>(m.input_shape(), 4, 9);
		EXPECT_TRUE(bitwise_equal(infer(m, x), infer(apply_mask(m, all_keep_mask(m)), x))) << name;
	}
}

TEST(ApplyMask, DeadChannelLeavesLogitsBitwiseUnchanged) {
	auto m = reference<double>("cnn_small", 3);
	auto& conv = m.node(4);
	const std::size_t per = conv.weight.size() / conv.weight.dim(0);
	for (std::size_t k = 0; k < per; ++k) conv.weight[5 * per + k] = 0;
	m.node(5).beta[5] = 0;
	m.node(5).running_mean[5] = 0;
	auto mask = all_keep_mask(m);
	mask[1][5] = 0;
	const auto x = random_inputs<double>(m.input_shape(), 6, 4);
	EXPECT_TRUE(bitwise_equal(infer(m, x), infer(apply_mask(m, mask), x)));
}

TEST(ApplyMask, TwoByTwoHandArithmetic) {
	const auto m = two_by_two();
	const Tensor<double> x({1, 2}, {1, 2});
	EXPECT_EQ(infer(m, x), Tensor<double>({1, 2}, {16, -1}));  // h = (5, 11)
	const auto masked = apply_mask(m, {{1, 0}});
	EXPECT_EQ(infer(masked, x), Tensor<double>({1, 2}, {5, 10}));  // h = (5, 0)
}

TEST(ApplyMask, RejectsMismatchedSites) {
	const auto m = two_by_two();
	EXPECT_THROW(apply_mask(m, {{1, 0}, {1}}), InputError);
	EXPECT_THROW(apply_mask(m, {{1, 0, 1}}), InputError);
}

TEST(ApplyMask, PrunedChannelsReceiveNoGradient) {
	auto m = reference<double>("cnn_small", 4);
	auto mask = all_keep_mask(m);
	mask[0][3] = mask[2][0] = 0;
	m.set_masks(mask);
	const auto x = random_inputs<double>(m.input_shape(), 4, 2);
	const int labels[] = {0, 1, 2, 3};
	for (auto mode : {Mode::Train, Mode::Eval}) {
		m.zero_grad();
		const auto rec = forward(m, x, mode);
		backward(m, rec, softmax_cross_entropy(rec.logits(), std::span<const int>(labels)).grad_logits);
		for (const auto& [site, ch] : {std::pair<std::size_t, std::size_t>{0, 3}, {2, 0}}) {
			const auto& conv = m.node(m.sites()[site].node);
			const std::size_t per = conv.grad_weight.size() / conv.grad_weight.dim(0);
			for (std::size_t k = 0; k < per; ++k) EXPECT_EQ(conv.grad_weight[ch * per + k], 0.0);
			const auto& bn = m.node(m.sites()[site].node + 1);
			EXPECT_EQ(bn.grad_gamma[ch], 0.0);
			EXPECT_EQ(bn.grad_beta[ch], 0.0);
		}
	}
}

// --- compact ----------------------------------------------------------------

TEST(Compact, AllKeepPreservesEverything) {
	for (const auto& name : reference_model_names()) {
		const auto m = reference<double>(name, 5);
		const auto c = compact(m, all_keep_mask(m));
		ASSERT_EQ(c.size(), m.size());
		EXPECT_EQ(c.parameter_count(), m.parameter_count());
		for (std::size_t i = 0; i < m.size(); ++i) {
			EXPECT_EQ(c.node(i).kind, m.node(i).kind);
			EXPECT_EQ(c.node(i).weight, m.node(i).weight);
			EXPECT_EQ(c.node(i).gamma, m.node(i).gamma);
			EXPECT_EQ(c.node(i).running_var, m.node(i).running_var);
		}
	}
}

TEST(Compact, RemovesMatchingSlices) {
	ModelBuilder<double> b("chain", {2, 6, 6}, 3, 9);
	int x = b.relu(b.batch_norm(b.conv(kModelInput, 4, 3, 1, 1)));
	x = b.relu(b.batch_norm(b.conv(x, 5, 3, 1, 1)));
	b.linear(b.flatten(x), 3);
	const auto m = std::move(b).build();
	const auto c = compact(m, {{1, 0, 1, 1}, {1, 1, 1, 1, 1}});
	EXPECT_EQ(c.node(0).weight.shape(), (Shape{3, 2, 3, 3}));
	EXPECT_EQ(c.node(0).bias.shape(), (Shape{3}));
	EXPECT_EQ(c.node(1).gamma.shape(), (Shape{3}));
	EXPECT_EQ(c.node(3).weight.shape(), (Shape{5, 3, 3, 3}));
	EXPECT_LT(c.parameter_count(), m.parameter_count());
	// Slices kept are the original channels 0, 2, 3.
	for (std::size_t k = 0; k < 18; ++k) EXPECT_EQ(c.node(0).weight[18 + k], m.node(0).weight[36 + k]);
	EXPECT_EQ(c.node(1).running_mean[1], m.node(1).running_mean[2]);
	EXPECT_EQ(c.node(3).weight.at(4, 2, 1, 1), m.node(3).weight.at(4, 3, 1, 1));
}

TEST(Compact, FlattenConsumerDropsWholeChannelBlocks) {
	auto m = reference<double>("cnn_small", 6);
	auto mask = all_keep_mask(m);
	mask[2][0] = mask[2][31] = 0;
	const auto c = compact(m, mask);
	const std::size_t inner = m.node(13).weight.dim(1) / 32;
	EXPECT_EQ(c.node(13).weight.shape(), (Shape{4, 30 * inner}));
	EXPECT_EQ(c.node(13).weight.at(2, 0), m.node(13).weight.at(2, inner));
}

TEST(Compact, MatchesMaskedModelOnRandomMasks) {
	std::mt19937_64 rng(21);
	for (const auto& name : reference_model_names())
		for (std::uint64_t t = 0; t < 8; ++t) {
			const auto m64 = reference<double>(name, 30 + t);
			const auto mask = random_mask(m64, rng);
			EXPECT_LT(validate_equivalence(m64, mask, 20, t), 1e-10) << name << " trial " << t;
			EXPECT_LT(validate_equivalence(m64.cast<float>(), mask, 20, t), 1e-5) << name << " trial " << t;
			EXPECT_LT(compact(m64, mask).parameter_count(), m64.parameter_count());
		}
}

TEST(Compact, AllKeepDeviationIsZero) {
	const auto m = reference<double>("mlp_small", 7);
	EXPECT_EQ(validate_equivalence(m, all_keep_mask(m), 10), 0.0);
}

// Rolling the consumer's input slice by one channel must be caught.
TEST(Compact, DetectsCorruptedSlice) {
	const auto m = reference<double>("cnn_small", 8);
	auto mask = all_keep_mask(m);
	mask[0][2] = mask[0][9] = 0;
	auto bad = compact(m, mask);
	auto& w = bad.node(4).weight;
	const Tensor<double> orig = w;
	const std::size_t C = w.dim(1);
	for (std::size_t f = 0; f < w.dim(0); ++f)
		for (std::size_t c = 0; c < C; ++c)
			for (std::size_t i = 0; i < 3; ++i)
				for (std::size_t j = 0; j < 3; ++j) w.at(f, c, i, j) = orig.at(f, (c + 1) % C, i, j);
	EXPECT_GT(max_logit_deviation(apply_mask(m, mask), bad, 20), 1e-3);
}

TEST(Compact, RejectsEmptySiteAndWrongShape) {
	const auto m = reference<double>("mlp_small", 1);
	auto mask = all_keep_mask(m);
	std::fill(mask[0].begin(), mask[0].end(), 0);
	EXPECT_THROW(compact(m, mask), InputError);
	EXPECT_THROW(compact(m, PruneMask{{1}}), InputError);
}

TEST(Compact, ResidualModelPrunesOnlyInteriorSites) {
	const auto m = reference<double>("cnn_residual", 9);
	ASSERT_EQ(m.sites().size(), 2u);
	EXPECT_EQ(m.sites()[0].node, 4u);
	EXPECT_EQ(m.sites()[1].node, 11u);
	auto mask = all_keep_mask(m);
	mask[0][0] = mask[1][23] = 0;
	const auto c = compact(m, mask);
	EXPECT_EQ(c.node(7).weight.shape(), (Shape{16, 15, 3, 3}));  // add input width unchanged
	EXPECT_EQ(c.node(8).gamma.size(), 16u);
	EXPECT_LT(validate_equivalence(m, mask, 10), 1e-10);
}

// Pruning the channels the dead-neuron rule scores at zero changes no logit.
TEST(Compact, DeadOutgoingChannelPrunesWithoutEffect) {
	auto m = reference<double>("mlp_small", 10);
	auto& next = m.node(4).weight;
	for (std::size_t f = 0; f < next.dim(0); ++f) next.at(f, 6) = 0;
	auto mask = all_keep_mask(m);
	mask[0][6] = 0;
	EXPECT_LE(max_logit_deviation(m, compact(m, mask), 50), 1e-10);
	EXPECT_LE(max_logit_deviation(m, apply_mask(m, mask), 50), 1e-10);
}
