#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <chanprune/chanprune.hpp>
#include <chanprune/cli.hpp>

using namespace chanprune;
namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
protected:
	fs::path dir;

	void SetUp() override {
		dir = fs::temp_directory_path() /
				("chanprune_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
		fs::remove_all(dir);
		fs::create_directories(dir);
	}
	void TearDown() override { fs::remove_all(dir); }

	std::string path(const std::string& name) const { return (dir / name).string(); }

	void write(const std::string& name, const std::string& text) const { std::ofstream(path(name)) << text; }

	static std::string slurp(const std::string& p) {
		std::ifstream in(p, std::ios::binary);
		return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
	}

	int run(std::vector<std::string> args) {
		out.str("");
		err.str("");
		return run_cli(args, out, err);
	}

	// Small, fast configuration: 2 epochs on 8 examples per class.
	std::string tiny_config() {
		write("c.cfg",
				"model = cnn_small\n"
				"train_per_class = 8\n"
				"test_per_class = 6\n"
				"epochs = 2\n"
				"batch_size = 8\n"
				"methods = taylorfo_sq/loss, taylorfo_sq/random/norm, random\n"
				"data_sizes = 2, full\n"
				"prune_counts = 0, 10, 30\n");
		return path("c.cfg");
	}

	std::ostringstream out, err;
};

std::size_t line_count(const std::string& s) {
	return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST_F(Cli, SweepWritesDocumentedHeader) {
	ASSERT_EQ(run({"--config", tiny_config(), "--out", path("r.csv"), "sweep"}), 0) << err.str();
	const std::string csv = slurp(path("r.csv"));
	EXPECT_EQ(csv.substr(0, csv.find('\n')),
			"estimator,source,normalized,data_size,pruned_count,pruned_fraction,test_accuracy,seed");
	EXPECT_EQ(line_count(csv), 1u + 3 * 2 * 3);  // methods × D × (baseline + two P)
}

TEST_F(Cli, TrainEvalPruneRoundTrip) {
	const auto cfg = tiny_config();
	ASSERT_EQ(run({"--config", cfg, "--out", path("m.npkt"), "train"}), 0) << err.str();
	EXPECT_NE(out.str().find("epoch 2 "), std::string::npos);
	ASSERT_EQ(run({"--config", cfg, "eval", "--checkpoint", path("m.npkt")}), 0) << err.str();
	const std::string eval_line = out.str();

	// P = 0 sweep rows use the same test split and must agree with eval.
	ASSERT_EQ(run({"--config", cfg, "--out", path("r.csv"), "sweep", "--checkpoint", path("m.npkt")}), 0) << err.str();
	std::istringstream rows(slurp(path("r.csv")));
	std::string header, first;
	std::getline(rows, header);
	std::getline(rows, first);
	const std::string acc(split_fields(first, ',')[6]);
	EXPECT_EQ(eval_line, "accuracy " + acc + "\n");

	ASSERT_EQ(run({"--config", cfg, "--out", path("t.csv"), "importance", "--checkpoint", path("m.npkt")}), 0)
			<< err.str();
	ASSERT_EQ(run({"--out", path("small.npkt"), "prune", "--checkpoint", path("m.npkt"), "--importance", path("t.csv"),
	                  "--fraction", "0.25", "--plan", path("plan.csv")}),
			0)
			<< err.str();
	EXPECT_NE(out.str().find("pruned 18 of 72"), std::string::npos) << out.str();
	EXPECT_EQ(line_count(slurp(path("plan.csv"))), 73u);
	const auto small = load_checkpoint<float>(path("small.npkt"));
	EXPECT_EQ(small.total_prunable_channels(), 72u - 18);
	EXPECT_EQ(run({"--config", cfg, "eval", "--checkpoint", path("small.npkt")}), 0) << err.str();
}

TEST_F(Cli, LabelFreeImportanceOnUnlabeledIdx) {
	const auto cfg = tiny_config();
	ASSERT_EQ(run({"--config", cfg, "--out", path("m.npkt"), "train"}), 0) << err.str();
	ASSERT_EQ(run({"--config", cfg, "data", "--images", path("img.idx")}), 0) << err.str();
	ASSERT_FALSE(fs::exists(path("lab.idx")));
	const std::vector<std::string> cmd{"--seed", "11", "--out", path("a.csv"), "importance", "--checkpoint",
			path("m.npkt"), "--images", path("img.idx"), "--source", "random", "--normalize", "--data-size", "2"};
	ASSERT_EQ(run(cmd), 0) << err.str();
	const std::string a = slurp(path("a.csv"));
	EXPECT_EQ(line_count(a), 73u);
	EXPECT_EQ(a.substr(0, a.find('\n')), "site_id,node_index,channel,score,estimator,source,normalized,data_size,seed");
	EXPECT_NE(a.find(",taylorfo_sq,random,1,2,11\n"), std::string::npos);

	auto again = cmd;
	again[3] = path("b.csv");
	ASSERT_EQ(run(again), 0) << err.str();
	EXPECT_EQ(slurp(path("b.csv")), a);

	// The loss source cannot run without labels.
	EXPECT_EQ(run({"importance", "--checkpoint", path("m.npkt"), "--images", path("img.idx")}), 3);
	EXPECT_NE(err.str().find("labels"), std::string::npos);
}

TEST_F(Cli, ExitCodes) {
	EXPECT_EQ(run({}), 1);
	EXPECT_EQ(run({"frobnicate"}), 1);
	EXPECT_EQ(run({"eval"}), 1);  // --checkpoint is required
	EXPECT_EQ(run({"importance", "--checkpoint", "x", "--estimator", "hessian"}), 1);

	write("bad.cfg", "epochs = 2\nlearning_rte = 0.1\n");
	EXPECT_EQ(run({"--config", path("bad.cfg"), "sweep"}), 2);
	EXPECT_NE(err.str().find("learning_rte"), std::string::npos);
	EXPECT_NE(err.str().find("bad.cfg:2"), std::string::npos);
	EXPECT_EQ(run({"--config", path("missing.cfg"), "sweep"}), 2);

	EXPECT_EQ(run({"eval", "--checkpoint", path("none.npkt")}), 3);
	EXPECT_NE(err.str().find("none.npkt"), std::string::npos);
	write("junk.npkt", "not a checkpoint");
	EXPECT_EQ(run({"eval", "--checkpoint", path("junk.npkt")}), 3);

	EXPECT_EQ(run({"--help"}), 0);
}

TEST_F(Cli, SweepIsByteDeterministic) {
	const auto cfg = tiny_config();
	ASSERT_EQ(run({"--config", cfg, "--out", path("a.csv"), "sweep"}), 0) << err.str();
	ASSERT_EQ(run({"--config", cfg, "--out", path("b.csv"), "sweep"}), 0) << err.str();
	EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
}
