#ifndef CHANPRUNE_CLI_HPP_
#define CHANPRUNE_CLI_HPP_

// Command-line front end. Needs CLI11 (CLI11.hpp) on the include path.

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "experiment.hpp"
#include "importance.hpp"
#include "pruning.hpp"
#include "train.hpp"

namespace chanprune {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitConfig = 2, kExitRuntime = 3 };

namespace detail {

struct CliState {
	std::string config_path;
	std::optional<std::uint64_t> seed;
	std::string out;

	std::string checkpoint, images, labels, importance_csv, plan_csv, split = "train";
	std::string estimator = "taylorfo_sq", source = "loss";
	bool normalize = false, per_layer_normalize = false;
	std::size_t data_size = 0, batch_size = 0, count = 0;
	std::optional<double> fraction;
	std::optional<std::size_t> finetune_epochs;
	std::string out_images, out_labels;
};

inline ExperimentConfig cli_config(const CliState& s) {
	std::istringstream empty;
	ExperimentConfig c = s.config_path.empty() ? parse_config(empty) : load_config(s.config_path);
	if (s.seed) {
		c.train.seed = *s.seed;
		c.sweep.finetune.seed = *s.seed;
	}
	return c;
}

// Writes to --out when given, else to `fallback`.
template <typename Fn>
void emit(const std::string& path, std::ostream& fallback, Fn&& write) {
	if (path.empty()) {
		write(fallback);
		return;
	}
	std::ofstream os(path, std::ios::binary);
	if (!os) throw InputError("cannot write '" + path + "'");
	write(os);
}

inline Dataset cli_dataset(const CliState& s, const ExperimentConfig& c, std::size_t num_classes, Split split) {
	if (!s.images.empty()) {
		Dataset d = load_idx(s.images, s.labels.empty() ? std::nullopt : std::optional<std::string>(s.labels), num_classes);
		d.num_classes = num_classes;
		return d;
	}
	auto splits = load_datasets(c.dataset);
	return split == Split::Train ? std::move(splits.train) : std::move(splits.test);
}

inline int cmd_train(const CliState& s, std::ostream& out) {
	const auto c = cli_config(s);
	if (s.out.empty()) throw InputError("train needs --out <checkpoint>");
	const auto data = load_datasets(c.dataset);
	auto model = model_from_config<float>(c, data.train.num_classes, data.train.example_shape());
	for (const auto& e : train(model, data.train, c.train))
		out << "epoch " << e.epoch << " loss " << format_double(e.loss) << " train_acc " << format_double(e.accuracy)
		    << '\n';
	out << "test_acc " << format_double(evaluate(model, data.test, c.sweep.eval_batch_size)) << '\n';
	save_checkpoint(model, s.out);
	return kExitOk;
}

inline int cmd_importance(const CliState& s, std::ostream& out) {
	const auto c = cli_config(s);
	const auto model = load_checkpoint<float>(s.checkpoint);
	const Dataset data = cli_dataset(s, c, model.num_classes(), Split::Train);
	GradientSource src{parse_gradient_kind(s.source), s.normalize, s.seed.value_or(c.train.seed)};
	const std::size_t D = s.data_size == 0 ? data.size() : s.data_size;
	const std::size_t bs = s.batch_size == 0 ? c.sweep.importance_batch_size : s.batch_size;
	const auto table = estimate(model, data, parse_estimator(s.estimator), src, {D, bs});
	emit(s.out, out, [&](std::ostream& os) { write_csv(os, table); });
	return kExitOk;
}

inline int cmd_prune(const CliState& s, std::ostream& out) {
	const auto model = load_checkpoint<float>(s.checkpoint);
	std::ifstream in(s.importance_csv);
	if (!in) throw InputError("cannot open importance table '" + s.importance_csv + "'");
	const auto table = read_importance_csv(in);
	const std::size_t N = model.total_prunable_channels();
	const std::size_t P = s.fraction ? counts_from_fractions({*s.fraction}, N).front() : s.count;
	const auto plan = rank_global(table, P, {s.per_layer_normalize});
	if (!s.plan_csv.empty()) emit(s.plan_csv, out, [&](std::ostream& os) { write_csv(os, plan); });
	const auto small = compact(model, plan.mask);
	out << "pruned " << plan.prune_count << " of " << N << " channels (" << plan.skipped.size() << " skipped); parameters "
	    << model.parameter_count() << " -> " << small.parameter_count() << '\n';
	if (!s.out.empty()) save_checkpoint(small, s.out);
	return kExitOk;
}

inline int cmd_sweep(const CliState& s, std::ostream& out) {
	auto c = cli_config(s);
	const auto data = load_datasets(c.dataset);
	const std::string ckpt = !s.checkpoint.empty() ? s.checkpoint : c.checkpoint;
	Model<float> model;
	if (!ckpt.empty()) {
		model = load_checkpoint<float>(ckpt);
	} else {
		model = model_from_config<float>(c, data.train.num_classes, data.train.example_shape());
		train(model, data.train, c.train);
	}
	if (s.finetune_epochs) c.sweep.finetune_epochs = *s.finetune_epochs;
	c.sweep.prune_counts = c.prune_counts_for(model.total_prunable_channels());
	const auto rows = prune_sweep(model, data.train, data.test, c.sweep);
	emit(s.out, out, [&](std::ostream& os) { write_csv(os, rows); });
	return kExitOk;
}

inline int cmd_eval(const CliState& s, std::ostream& out) {
	const auto c = cli_config(s);
	const auto model = load_checkpoint<float>(s.checkpoint);
	const Dataset data = cli_dataset(s, c, model.num_classes(), Split::Test);
	out << "accuracy " << format_double(evaluate(model, data, c.sweep.eval_batch_size)) << '\n';
	return kExitOk;
}

inline int cmd_data(const CliState& s, std::ostream& out) {
	const auto c = cli_config(s);
	const auto data = load_datasets(c.dataset);
	const Dataset& d = s.split == "test" ? data.test : data.train;
	write_idx(d, s.out_images, s.out_labels.empty() ? std::nullopt : std::optional<std::string>(s.out_labels));
	out << "wrote " << d.size() << " examples\n";
	return kExitOk;
}

}  // namespace detail

/**
 * Runs one subcommand. `args` excludes the program name. Exit codes: 0 ok,
 * 1 usage, 2 configuration, 3 runtime. Errors go to `err`.
 */
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
	detail::CliState s;
	CLI::App app{"Structured channel pruning lab"};
	app.require_subcommand(1);
	app.add_option("--config", s.config_path, "Flat key = value config file");
	app.add_option("--seed", s.seed, "Seed override (training shuffle; random-gradient stream)");
	app.add_option("--out", s.out, "Output path");

	auto* tr = app.add_subcommand("train", "Train a reference model and save a checkpoint");
	tr->fallthrough();

	auto* im = app.add_subcommand("importance", "Estimate channel importance and write a CSV table");
	im->fallthrough();
	im->add_option("--checkpoint", s.checkpoint)->required();
	im->add_option("--images", s.images, "IDX images (default: the config's training split)");
	im->add_option("--labels", s.labels, "IDX labels (needed only for --source loss)");
	im->add_option("--estimator", s.estimator)
			->check(CLI::IsMember({"taylorfo", "taylorfo_abs", "taylorfo_sq", "molchanov_bn", "molchanov_group", "random"}));
	im->add_option("--source", s.source)->check(CLI::IsMember({"loss", "random"}));
	im->add_flag("--normalize", s.normalize, "Scale each output-gradient row to unit L2 norm");
	im->add_option("--data-size", s.data_size, "D, the number of leading examples (default: all)");
	im->add_option("--batch-size", s.batch_size);

	auto* pr = app.add_subcommand("prune", "Rank globally, prune, and save the compacted model");
	pr->fallthrough();
	pr->add_option("--checkpoint", s.checkpoint)->required();
	pr->add_option("--importance", s.importance_csv)->required();
	auto* cnt = pr->add_option("--count", s.count, "P, channels to prune");
	auto* frac = pr->add_option("--fraction", s.fraction, "P as a fraction of N");
	cnt->excludes(frac);
	pr->add_flag("--per-layer-normalize", s.per_layer_normalize);
	pr->add_option("--plan", s.plan_csv, "Write the prune plan CSV here");

	auto* sw = app.add_subcommand("sweep", "Run the prune-vs-accuracy grid and write a CSV");
	sw->fallthrough();
	sw->add_option("--checkpoint", s.checkpoint, "Trained model (default: train from the config)");
	sw->add_option("--finetune-epochs", s.finetune_epochs, "Fine-tune each pruned model (default 0)");

	auto* ev = app.add_subcommand("eval", "Test accuracy of a checkpoint");
	ev->fallthrough();
	ev->add_option("--checkpoint", s.checkpoint)->required();
	ev->add_option("--images", s.images);
	ev->add_option("--labels", s.labels);

	auto* da = app.add_subcommand("data", "Export a configured dataset split to IDX files");
	da->fallthrough();
	da->add_option("--split", s.split)->check(CLI::IsMember({"train", "test"}));
	da->add_option("--images", s.out_images)->required();
	da->add_option("--labels", s.out_labels);

	try {
		std::vector<std::string> rev(args.rbegin(), args.rend());
		app.parse(rev);
	} catch (const CLI::ParseError& e) {
		const int code = app.exit(e, out, err);
		return code == 0 ? kExitOk : kExitUsage;
	}

	try {
		if (tr->parsed()) return detail::cmd_train(s, out);
		if (im->parsed()) return detail::cmd_importance(s, out);
		if (pr->parsed()) return detail::cmd_prune(s, out);
		if (sw->parsed()) return detail::cmd_sweep(s, out);
		if (ev->parsed()) return detail::cmd_eval(s, out);
		if (da->parsed()) return detail::cmd_data(s, out);
	} catch (const ConfigError& e) {
		err << "config error: " << e.what() << '\n';
		return kExitConfig;
	} catch (const std::exception& e) {
		err << "error: " << e.what() << '\n';
		return kExitRuntime;
	}
	return kExitUsage;
}

}  // namespace chanprune

#endif  // CHANPRUNE_CLI_HPP_
