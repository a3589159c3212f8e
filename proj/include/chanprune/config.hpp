#ifndef CHANPRUNE_CONFIG_HPP_
#define CHANPRUNE_CONFIG_HPP_

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "csv.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "experiment.hpp"
#include "reference_models.hpp"
#include "train.hpp"

namespace chanprune {

struct DatasetSpec {
	std::string kind = "shapes";  // shapes | idx
	ShapesConfig shapes;
	std::size_t train_per_class = 160;
	std::size_t test_per_class = 64;
	std::string train_images, train_labels, test_images, test_labels;  // idx only
};

struct ExperimentConfig {
	std::string model = "cnn_small";
	std::uint64_t model_seed = 1;
	DatasetSpec dataset;
	TrainConfig train;
	SweepConfig sweep;
	std::vector<double> prune_fractions;  // used when prune_counts is not given
	bool prune_counts_given = false;
	std::string checkpoint;  // sweep: load instead of training when set

	/// Resolves prune counts against a model's N.
	std::vector<std::size_t> prune_counts_for(std::size_t N) const {
		if (prune_counts_given) return sweep.prune_counts;
		return counts_from_fractions(prune_fractions.empty() ? default_prune_fractions() : prune_fractions, N);
	}
};

namespace detail {

inline std::string trim(std::string_view s) {
	const auto b = s.find_first_not_of(" \t\r");
	if (b == std::string_view::npos) return {};
	const auto e = s.find_last_not_of(" \t\r");
	return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> list_items(const std::string& v) {
	std::vector<std::string> out;
	for (auto f : split_fields(v, ','))
		if (auto t = trim(f); !t.empty()) out.push_back(t);
	return out;
}

}  // namespace detail

/**
 * Parses flat `key = value` text. `#` starts a comment; blank lines are
 * ignored. Lists are comma-separated. Unknown keys, repeated keys and
 * malformed values raise ConfigError naming the key and line.
 */
inline ExperimentConfig parse_config(std::istream& in, const std::string& origin = "<config>") {
	ExperimentConfig c;
	c.sweep.methods = {parse_method("taylorfo_sq/loss"), parse_method("random")};
	c.sweep.data_sizes = {0};

	std::string line;
	std::size_t lineno = 0;
	std::map<std::string, std::size_t> seen;
	while (std::getline(in, line)) {
		++lineno;
		if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
		const std::string body = detail::trim(line);
		if (body.empty()) continue;
		const auto eq = body.find('=');
		const std::string where = origin + ":" + std::to_string(lineno);
		if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
		const std::string key = detail::trim(std::string_view(body).substr(0, eq));
		const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
		if (seen.count(key)) throw ConfigError(where + ": key '" + key + "' repeats line " + std::to_string(seen[key]));
		seen[key] = lineno;

		auto fail = [&](const std::string& why) { throw ConfigError(where + ": key '" + key + "': " + why); };
		auto as_u64 = [&](const std::string& v) -> std::uint64_t {
			try {
				return parse_u64(v);
			} catch (const FormatError&) {
				fail("expected a non-negative integer, got '" + v + "'");
			}
			return 0;
		};
		auto as_double = [&](const std::string& v) -> double {
			try {
				return parse_double(v);
			} catch (const FormatError&) {
				fail("expected a number, got '" + v + "'");
			}
			return 0;
		};
		auto as_bool = [&](const std::string& v) -> bool {
			if (v == "true" || v == "1" || v == "yes") return true;
			if (v == "false" || v == "0" || v == "no") return false;
			fail("expected true or false, got '" + v + "'");
			return false;
		};
		auto sz = [&](const std::string& v) { return static_cast<std::size_t>(as_u64(v)); };

		const std::map<std::string, std::function<void()>> handlers{
				{"model", [&] { c.model = value; }},
				{"model_seed", [&] { c.model_seed = as_u64(value); }},
				{"dataset", [&] {
					 if (value != "shapes" && value != "idx") fail("expected shapes or idx");
					 c.dataset.kind = value;
				 }},
				{"num_classes", [&] { c.dataset.shapes.num_classes = sz(value); }},
				{"image_size", [&] { c.dataset.shapes.image_size = sz(value); }},
				{"noise", [&] { c.dataset.shapes.noise = as_double(value); }},
				{"data_seed", [&] { c.dataset.shapes.seed = as_u64(value); }},
				{"train_per_class", [&] { c.dataset.train_per_class = sz(value); }},
				{"test_per_class", [&] { c.dataset.test_per_class = sz(value); }},
				{"train_images", [&] { c.dataset.train_images = value; }},
				{"train_labels", [&] { c.dataset.train_labels = value; }},
				{"test_images", [&] { c.dataset.test_images = value; }},
				{"test_labels", [&] { c.dataset.test_labels = value; }},
				{"epochs", [&] { c.train.epochs = sz(value); }},
				{"batch_size", [&] { c.train.batch_size = sz(value); }},
				{"learning_rate", [&] { c.train.learning_rate = as_double(value); }},
				{"momentum", [&] { c.train.momentum = as_double(value); }},
				{"weight_decay", [&] { c.train.weight_decay = as_double(value); }},
				{"seed", [&] { c.train.seed = as_u64(value); }},
				{"checkpoint", [&] { c.checkpoint = value; }},
				{"methods", [&] {
					 c.sweep.methods.clear();
					 for (const auto& m : detail::list_items(value)) {
						 try {
							 c.sweep.methods.push_back(parse_method(m));
						 } catch (const InputError& e) {
							 fail(e.what());
						 }
					 }
					 if (c.sweep.methods.empty()) fail("needs at least one method");
				 }},
				{"data_sizes", [&] {
					 c.sweep.data_sizes.clear();
					 for (const auto& d : detail::list_items(value)) {
						 const std::size_t D = d == "full" ? 0 : sz(d);
						 if (d != "full" && D == 0) fail("data sizes must be positive or 'full'");
						 c.sweep.data_sizes.push_back(D);
					 }
					 if (c.sweep.data_sizes.empty()) fail("needs at least one data size");
				 }},
				{"prune_counts", [&] {
					 c.sweep.prune_counts.clear();
					 for (const auto& p : detail::list_items(value)) c.sweep.prune_counts.push_back(sz(p));
					 c.prune_counts_given = true;
				 }},
				{"prune_fractions", [&] {
					 c.prune_fractions.clear();
					 for (const auto& p : detail::list_items(value)) c.prune_fractions.push_back(as_double(p));
				 }},
				{"seeds", [&] {
					 c.sweep.seeds.clear();
					 for (const auto& s : detail::list_items(value)) c.sweep.seeds.push_back(as_u64(s));
					 if (c.sweep.seeds.empty()) fail("needs at least one seed");
				 }},
				{"importance_batch_size", [&] { c.sweep.importance_batch_size = sz(value); }},
				{"eval_batch_size", [&] { c.sweep.eval_batch_size = sz(value); }},
				{"per_layer_normalize", [&] { c.sweep.per_layer_normalize = as_bool(value); }},
				{"finetune_epochs", [&] { c.sweep.finetune_epochs = sz(value); }},
		};
		const auto h = handlers.find(key);
		if (h == handlers.end()) throw ConfigError(where + ": unknown key '" + key + "'");
		h->second();
	}
	if (seen.count("prune_counts") && seen.count("prune_fractions"))
		throw ConfigError(origin + ": set prune_counts or prune_fractions, not both");
	if (c.train.batch_size == 0) throw ConfigError(origin + ": key 'batch_size' must be at least 1");
	if (c.sweep.importance_batch_size == 0 || c.sweep.eval_batch_size == 0)
		throw ConfigError(origin + ": batch sizes must be at least 1");
	c.sweep.finetune = c.train;
	return c;
}

inline ExperimentConfig load_config(const std::string& path) {
	std::ifstream in(path);
	if (!in) throw ConfigError("cannot open config file '" + path + "'");
	return parse_config(in, path);
}

/// Train and test splits described by the config.
inline DataSplits load_datasets(const DatasetSpec& spec) {
	if (spec.kind == "shapes") return generate_shape_splits(spec.shapes, spec.train_per_class, spec.test_per_class);
	if (spec.train_images.empty() || spec.test_images.empty())
		throw ConfigError("dataset = idx needs train_images and test_images");
	auto opt = [](const std::string& p) { return p.empty() ? std::nullopt : std::optional<std::string>(p); };
	Dataset train = load_idx(spec.train_images, opt(spec.train_labels));
	Dataset test = load_idx(spec.test_images, opt(spec.test_labels), train.num_classes);
	test.split = Split::Test;
	return {std::move(train), std::move(test)};
}

template <Scalar T>
Model<T> model_from_config(const ExperimentConfig& c, std::size_t num_classes, const Shape& example_shape) {
	if (example_shape[1] != example_shape[2]) throw ConfigError("reference models need square images");
	ReferenceConfig rc;
	rc.num_classes = num_classes;
	rc.in_channels = example_shape[0];
	rc.image_size = example_shape[1];
	rc.seed = c.model_seed;
	try {
		return make_reference_model<T>(c.model, rc);
	} catch (const InputError& e) {
		throw ConfigError(std::string("key 'model': ") + e.what());
	}
}

}  // namespace chanprune

#endif  // CHANPRUNE_CONFIG_HPP_
