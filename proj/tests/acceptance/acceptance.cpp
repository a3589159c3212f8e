// Acceptance run: one PASS/FAIL line per criterion, exit status = failures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <chanprune/chanprune.hpp>
#include <chanprune/cli.hpp>

#include "../fixtures.hpp"
#include "../oracles.hpp"

using namespace chanprune;
namespace fs = std::filesystem;

namespace {

int failures = 0;

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
	char buf[256];
	std::snprintf(buf, sizeof buf, f, a, b, c, d);
	return buf;
}

void report(int n, bool ok, const std::string& detail) {
	std::cout << (ok ? "PASS" : "FAIL") << " criterion " << n << ": " << detail << std::endl;
	failures += !ok;
}

void run(int n, const std::function<void()>& body) {
	try {
		body();
	} catch (const std::exception& e) {
		report(n, false, std::string("exception: ") + e.what());
	}
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
	return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const Estimator kAllFive[] = {Estimator::TaylorFO, Estimator::TaylorFOAbs, Estimator::TaylorFOSq, Estimator::MolchanovBN,
		Estimator::MolchanovGroup};

template <Scalar T>
Model<T> reference(const std::string& name, std::uint64_t seed) {
	ReferenceConfig cfg;
	cfg.seed = seed;
	auto m = make_reference_model<T>(name, cfg);
	fixture::randomize_batchnorm(m, seed + 7);
	return m;
}

std::string slurp(const fs::path& p) {
	std::ifstream in(p, std::ios::binary);
	return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int cli(std::vector<std::string> args) {
	std::ostringstream out, err;
	const int rc = run_cli(args, out, err);
	if (rc != 0) std::cerr << "cli exit " << rc << ": " << err.str();
	return rc;
}

// --- 1: adjoint correctness --------------------------------------------------

void gradient_correctness() {
	const auto t0 = std::chrono::steady_clock::now();
	bool ok = true;
	double worst = 0;
	std::size_t checked = 0;
	ReferenceConfig cfg;
	cfg.image_size = 8;
	for (const auto& name : reference_model_names()) {
		auto m = make_reference_model<double>(name, cfg);
		fixture::randomize_batchnorm(m, 11);
		const auto r = gradient_check(m, oracle::random_tensor<double>({2, 1, 8, 8}, 12));
		ok = ok && r.passed && r.checked == m.parameter_count();
		worst = std::max(worst, r.max_rel_error);
		checked += r.checked;
	}
	const double secs = seconds_since(t0);
	report(1, ok && secs < 60,
			fmt("%.0f parameters on 3 models, max rel error %.2e (tol 1e-6), %.1f s", static_cast<double>(checked), worst,
					secs));
}

// --- 2: hand arithmetic -------------------------------------------------------

void hand_arithmetic() {
	const Tensor<double> s({2, 1}, {1, -2});
	std::vector<double> got;
	for (auto e : {Estimator::TaylorFO, Estimator::TaylorFOAbs, Estimator::TaylorFOSq}) {
		std::vector<SiteAccumulator> a{make_accumulator(PrunableSite{0, 0, 1}, e)};
		accumulate(a[0], s, e);
		got.push_back(finalize(a, {}).entries.front().score);
	}
	LayerNode<double> bn;
	bn.kind = LayerKind::BatchNorm;
	bn.gamma = Tensor<double>({1}, {2});
	bn.beta = Tensor<double>({1}, {1});
	bn.running_mean = Tensor<double>({1});
	bn.running_var = Tensor<double>({1}, 1.0);
	const BnGradSample<double> g[] = {{Tensor<double>({1}, {3}), Tensor<double>({1}, {-1})}};
	got.push_back(molchanov_bn_score<double>(bn, g).at(0));
	const double want[] = {-0.5, 1.5, 2.5, 25.0};
	bool ok = true;
	for (std::size_t i = 0; i < 4; ++i) ok = ok && std::abs(got[i] - want[i]) <= 1e-12;
	report(2, ok, fmt("taylorfo %g, abs %g, sq %g (want -0.5, 1.5, 2.5); ", got[0], got[1], got[2]) +
			fmt("molchanov_bn %g (want 25)", got[3]));
}

// --- 3: molchanov_bn = taylorfo_sq at the BN output when beta = 0 -------------

void bn_equivalence() {
	double worst = 0;
	for (std::uint64_t seed = 1; seed <= 20; ++seed) {
		auto m = fixture::conv_bn_model<double>(2, 3, 5, 3, seed);
		fixture::randomize_batchnorm(m, seed);
		for (std::size_t c = 0; c < 3; ++c) m.node(1).beta[c] = 0;
		const auto data = fixture::random_dataset({2, 5, 5}, 1, 3, seed + 50);
		const auto table = estimate(m, data, Estimator::MolchanovBN, {}, {1, 1});

		// Oracle: squared signal at the BN output from a plain backward pass.
		const std::size_t idx[] = {0};
		const auto rec = forward(m, data.gather<double>(idx), Mode::Eval);
		const auto lab = data.gather_labels(idx);
		const auto loss = softmax_cross_entropy(rec.logits(), std::span<const int>(lab));
		const auto g = backward(m, rec, loss.grad_logits);
		std::vector<double> want(3, 0.0);
		for (std::size_t c = 0; c < 3; ++c) {
			double sig = 0;
			for (std::size_t h = 0; h < 5; ++h)
				for (std::size_t w = 0; w < 5; ++w) sig += rec.outputs[1].at(0, c, h, w) * g.node_grads[1].at(0, c, h, w);
			want[c] = sig * sig;
		}
		for (const auto& e : table.entries) worst = std::max(worst, oracle::rel_err(e.score, want[e.channel]));
	}
	report(3, worst <= 1e-6, fmt("20 batch-size-1 instances, max rel diff %.2e (tol 1e-6)", worst));
}

// --- 4: dead neurons ------------------------------------------------------------

void dead_neurons() {
	ReferenceConfig cfg;
	cfg.seed = 5;
	auto m = make_cnn_small<double>(cfg);
	fixture::randomize_batchnorm(m, 105);
	// Site 0 channel 1: zero filter and BN shift. Channel 3: zero outgoing slice.
	auto& conv = m.node(0);
	const std::size_t fan = conv.weight.size() / conv.weight.dim(0);
	for (std::size_t i = 0; i < fan; ++i) conv.weight[1 * fan + i] = 0;
	if (conv.has_bias()) conv.bias[1] = 0;
	m.node(1).beta[1] = 0;
	m.node(1).running_mean[1] = 0;
	auto& next = m.node(4).weight;
	for (std::size_t f = 0; f < next.dim(0); ++f)
		for (std::size_t i = 0; i < next.dim(2); ++i)
			for (std::size_t j = 0; j < next.dim(3); ++j) next.at(f, 3, i, j) = 0;

	const auto data = fixture::random_dataset({1, 16, 16}, 6, 4, 12);
	std::size_t zeros = 0, total = 0;
	for (auto kind : {GradientKind::Loss, GradientKind::Random})
		for (bool norm : {false, true})
			for (const auto& t : estimate_many(m, data, kAllFive, {kind, norm, 8}, {6, 4}))
				for (const auto& e : t.entries)
					if (e.site_id == 0 && (e.channel == 1 || e.channel == 3)) {
						++total;
						zeros += e.score == 0.0;
					}

	const auto x = random_inputs<double>(m.input_shape(), 8, 3);
	auto logits = [&](Model<double> net) { return forward(net, x, Mode::Eval).logits(); };
	const auto base = logits(m);
	auto mask_in = all_keep_mask(m), mask_out = all_keep_mask(m);
	mask_in[0][1] = 0;
	mask_out[0][3] = 0;
	const bool in_exact = logits(apply_mask(m, mask_in)) == base && logits(compact(m, mask_in)) == base;
	double out_dev = 0;
	for (const auto& pruned : {apply_mask(m, mask_out), compact(m, mask_out)}) {
		const auto y = logits(pruned);
		for (std::size_t i = 0; i < y.size(); ++i) out_dev = std::max(out_dev, std::abs(y[i] - base[i]));
	}
	report(4, zeros == total && total == 40 && in_exact && out_dev <= 1e-10,
			fmt("%.0f/%.0f scores exactly zero; ", static_cast<double>(zeros), static_cast<double>(total)) +
					"incoming-dead logits " + (in_exact ? "bitwise unchanged" : "changed") +
					fmt("; outgoing-dead max deviation %.2e", out_dev));
}

// --- 5: compaction equals masking ------------------------------------------------

void compaction_equivalence() {
	std::mt19937_64 rng(2024);
	double worst64 = 0, worst32 = 0;
	for (const auto& name : reference_model_names())
		for (std::uint64_t t = 0; t < 100; ++t) {
			const auto m64 = reference<double>(name, 1000 + t);
			PruneMask mask;
			std::bernoulli_distribution keep(0.5);
			for (const auto& s : m64.sites()) {
				std::vector<std::uint8_t> k(s.channels);
				for (auto& v : k) v = keep(rng);
				k[std::uniform_int_distribution<std::size_t>(0, s.channels - 1)(rng)] = 1;
				mask.push_back(std::move(k));
			}
			worst64 = std::max(worst64, validate_equivalence(m64, mask, 8, t));
			worst32 = std::max(worst32, validate_equivalence(m64.cast<float>(), mask, 8, t));
		}
	report(5, worst64 < 1e-10 && worst32 < 1e-5,
			fmt("300 trials, max deviation float64 %.2e (tol 1e-10), float32 %.2e (tol 1e-5)", worst64, worst32));
}

// --- 6: partition invariance --------------------------------------------------

void partition_invariance() {
	double worst = 0;
	std::size_t compared = 0;
	for (const auto& name : reference_model_names()) {
		const auto m = reference<double>(name, 3);
		const auto data = fixture::random_dataset(m.input_shape(), 8, 4, 17);
		for (auto kind : {GradientKind::Loss, GradientKind::Random})
			for (bool norm : {false, true}) {
				const GradientSource src{kind, norm, 99};
				const auto ref = estimate_many(m, data, kAllFive, src, {8, 8});
				for (std::size_t B : {1u, 3u}) {
					const auto t = estimate_many(m, data, kAllFive, src, {8, B});
					for (std::size_t k = 0; k < t.size(); ++k)
						for (std::size_t i = 0; i < t[k].entries.size(); ++i) {
							const double a = t[k].entries[i].score, b = ref[k].entries[i].score;
							worst = std::max(worst, std::abs(a - b) / std::max(1.0, std::abs(b)));
							++compared;
						}
				}
			}
	}
	report(6, worst <= 1e-12,
			fmt("%.0f scores, batch sizes 1/3/8, max diff %.2e (tol 1e-12)", static_cast<double>(compared), worst));
}

// --- 7-9: trained models on the glyph task -------------------------------------

struct Trained {
	std::uint64_t seed;
	Model<float> model;
	double train_acc;
};

const DataSplits& glyphs() {
	static const DataSplits s = generate_shape_splits(ShapesConfig{}, 160, 64);
	return s;
}

std::vector<Trained> trained;
double recipe_seconds = 0;
std::map<std::string, std::map<std::size_t, double>> mean_acc;  // method → P → mean accuracy

void train_and_sweep() {
	const auto t0 = std::chrono::steady_clock::now();
	const auto& d = glyphs();
	SweepConfig sc;
	for (const char* m : {"taylorfo_sq/loss", "taylorfo_abs/loss", "taylorfo_sq/random/norm", "random"})
		sc.methods.push_back(parse_method(m));
	sc.data_sizes = {0};
	for (std::uint64_t seed = 1; seed <= 5; ++seed) {
		ReferenceConfig rc;
		rc.seed = seed;
		auto m = make_cnn_small<float>(rc);
		TrainConfig tc;
		tc.seed = seed;
		train(m, d.train, tc);
		const double acc = evaluate(m, d.train);
		sc.seeds = {seed};
		sc.prune_counts = counts_from_fractions({0.3, 0.5}, m.total_prunable_channels());
		for (const auto& row : prune_sweep(m, d.train, d.test, sc))
			mean_acc[row.estimator + "/" + row.source + (row.normalized ? "/norm" : "")][row.pruned_count] +=
					row.test_accuracy / 5;
		trained.push_back({seed, std::move(m), acc});
	}
	recipe_seconds = seconds_since(t0);
}

void pruning_beats_random() {
	train_and_sweep();
	double min_train = 1;
	for (const auto& t : trained) min_train = std::min(min_train, t.train_acc);
	const auto P = counts_from_fractions({0.3, 0.5}, 72);
	const double sq = mean_acc["taylorfo_sq/loss"][P[1]], ab = mean_acc["taylorfo_abs/loss"][P[1]],
				 rnd = mean_acc["random/none"][P[1]];
	report(7, min_train >= 0.95 && sq - rnd >= 0.10 && ab - rnd >= 0.10 && recipe_seconds < 600,
			fmt("min train acc %.3f; at 50%%: sq %.3f, abs %.3f, random %.3f", min_train, sq, ab, rnd) +
					fmt(" (margin >= 0.10); %.0f s", recipe_seconds));
}

void label_free_close_to_loss() {
	const auto P = counts_from_fractions({0.3}, 72);
	const double loss = mean_acc["taylorfo_sq/loss"][P[0]], rnd = mean_acc["taylorfo_sq/random/norm"][P[0]];
	report(8, std::abs(loss - rnd) <= 0.05,
			fmt("at 30%%: taylorfo_sq/loss %.3f, taylorfo_sq/random/norm %.3f, gap %.3f (tol 0.05)", loss, rnd,
					std::abs(loss - rnd)));
}

void random_stream_stability() {
	const auto& m = trained.front().model;
	const std::size_t D = 512;
	double sum = 0;
	std::string detail;
	for (std::uint64_t a : {1u, 3u, 5u}) {
		std::vector<std::vector<double>> scores;
		for (std::uint64_t s : {a, a + 1}) {
			const auto t = estimate(m, glyphs().train, Estimator::TaylorFOSq, {GradientKind::Random, true, s}, {D, 64});
			std::vector<double> v;
			for (const auto& e : t.entries) v.push_back(e.score);
			scores.push_back(std::move(v));
		}
		const double rho = oracle::spearman(scores[0], scores[1]);
		sum += rho;
		detail += fmt(" %.3f", rho);
	}
	report(9, sum / 3 >= 0.8, fmt("D = 512, mean Spearman %.3f (>= 0.8), pairs:", sum / 3) + detail);
}

// --- 10-12: CLI and sweep ---------------------------------------------------------

fs::path workdir() {
	static const fs::path p = [] {
		auto d = fs::temp_directory_path() / "chanprune_acceptance";
		fs::remove_all(d);
		fs::create_directories(d);
		return d;
	}();
	return p;
}

void label_free_cli() {
	const fs::path dir = workdir();
	const auto s = [&](const char* n) { return (dir / n).string(); };
	save_checkpoint(trained.front().model, s("m.npkt"));
	// The unlabeled run reads from a directory holding no label file at all.
	fs::create_directories(dir / "bare");
	if (cli({"data", "--images", s("bare/img.idx")}) != 0 ||
			cli({"data", "--images", s("img.idx"), "--labels", s("lab.idx")}) != 0)
		throw std::runtime_error("data export");

	auto permuted = load_idx(s("img.idx"), s("lab.idx"));
	std::shuffle(permuted.labels.begin(), permuted.labels.end(), std::mt19937_64(77));
	write_idx(permuted, s("unused.idx"), s("perm.idx"));

	auto importance = [&](const char* out, const char* source, std::vector<std::string> extra,
							  const char* images = "img.idx") {
		std::vector<std::string> a{"--seed", "11", "--out", s(out), "importance", "--checkpoint", s("m.npkt"), "--images",
				s(images), "--source", source, "--normalize", "--data-size", "128"};
		a.insert(a.end(), extra.begin(), extra.end());
		if (cli(a) != 0) throw std::runtime_error(std::string("importance ") + out);
		return slurp(s(out));
	};
	const auto none = importance("none.csv", "random", {}, "bare/img.idx");
	const auto lab = importance("lab.csv", "random", {"--labels", s("lab.idx")});
	const auto perm = importance("perm.csv", "random", {"--labels", s("perm.idx")});
	// Control: the loss source does read labels.
	const auto loss_a = importance("la.csv", "loss", {"--labels", s("lab.idx")});
	const auto loss_b = importance("lb.csv", "loss", {"--labels", s("perm.idx")});
	const bool same = !none.empty() && none == lab && lab == perm;
	report(10, same && loss_a != loss_b,
			std::string("random-source tables ") + (same ? "byte-identical" : "differ") +
					" across no labels / labels / permuted labels; loss-source control " +
					(loss_a != loss_b ? "changes" : "does not change"));
}

void sweep_grid() {
	const auto& d = glyphs();
	const auto& m = trained.front().model;
	SweepConfig sc;
	for (const char* s : {"taylorfo/loss", "taylorfo_abs/loss", "taylorfo_sq/loss", "molchanov_bn/loss",
				 "molchanov_group/loss", "taylorfo_sq/random/norm", "random"})
		sc.methods.push_back(parse_method(s));
	sc.data_sizes = {2, 10, 100, 0};
	sc.prune_counts = {22, 36};
	const auto rows = prune_sweep(m, d.train, d.test, sc);
	std::map<std::pair<std::string, std::size_t>, std::size_t> cells;
	bool finite = true;
	for (const auto& r : rows) {
		++cells[{r.estimator + r.source + std::to_string(r.normalized), r.data_size}];
		finite = finite && std::isfinite(r.test_accuracy) && r.test_accuracy >= 0 && r.test_accuracy <= 1;
	}
	bool full = rows.size() == 7 * 4 * 3 && cells.size() == 7 * 4;
	for (const auto& [k, n] : cells) full = full && n == 3;

	std::size_t d2_scores = 0;
	bool d2_finite = true;
	const Estimator ests[] = {Estimator::TaylorFO, Estimator::TaylorFOAbs, Estimator::TaylorFOSq, Estimator::MolchanovBN,
			Estimator::MolchanovGroup};
	for (auto src : {GradientSource{GradientKind::Loss, false, 1}, GradientSource{GradientKind::Random, true, 1}})
		for (const auto& t : estimate_many(m, d.train, ests, src, {2, 64}))
			for (const auto& e : t.entries) {
				d2_finite = d2_finite && std::isfinite(e.score);
				++d2_scores;
			}
	report(11, full && finite && d2_finite,
			fmt("%.0f rows over 7 methods x D {2, 10, 100, 640} x 3 P values; ", static_cast<double>(rows.size())) +
					(finite ? "all accuracies finite" : "non-finite accuracy") +
					fmt("; %.0f D=2 scores ", static_cast<double>(d2_scores)) + (d2_finite ? "finite" : "non-finite"));
}

void sweep_determinism() {
	const fs::path dir = workdir();
	const auto cfg = (dir / "sweep.cfg").string();
	std::ofstream(cfg) << "train_per_class = 40\ntest_per_class = 20\nepochs = 3\ndata_sizes = 2, 10, full\n";
	const auto a = (dir / "a.csv").string(), b = (dir / "b.csv").string();
	if (cli({"--config", cfg, "--out", a, "sweep"}) != 0 || cli({"--config", cfg, "--out", b, "sweep"}) != 0)
		throw std::runtime_error("sweep failed");
	const auto x = slurp(a), y = slurp(b);
	report(12, !x.empty() && x == y,
			fmt("two sweeps, %.0f bytes each, ", static_cast<double>(x.size())) + (x == y ? "identical" : "different"));
}

}  // namespace

int main() {
	run(1, gradient_correctness);
	run(2, hand_arithmetic);
	run(3, bn_equivalence);
	run(4, dead_neurons);
	run(5, compaction_equivalence);
	run(6, partition_invariance);
	run(7, pruning_beats_random);
	run(8, label_free_close_to_loss);
	run(9, random_stream_stability);
	run(10, label_free_cli);
	run(11, sweep_grid);
	run(12, sweep_determinism);
	fs::remove_all(workdir());
	std::cout << (failures == 0 ? "all criteria pass" : std::to_string(failures) + " criteria fail") << std::endl;
	return failures;
}
