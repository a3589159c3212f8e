#ifndef CHANPRUNE_GRADIENT_CHECK_HPP_
#define CHANPRUNE_GRADIENT_CHECK_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "engine.hpp"
#include "random.hpp"

namespace chanprune {

struct GradientCheckReport {
	bool passed = true;
	double max_rel_error = 0;
	std::size_t checked = 0;
	int failing_node = -1;  // node with the largest error, when the check fails
	std::string failing_param;
	std::size_t failing_index = 0;
	double analytic = 0, numeric = 0;
};

struct GradientCheckOptions {
	double tolerance = 1e-6;
	double step = 1e-5;
	std::uint64_t seed = 7;  // output-gradient direction
	/// Eval keeps BatchNorm affine, so f is exactly linear in each single
	/// parameter away from ReLU/max-pool switching points and the central
	/// difference carries no truncation error. Train exercises the
	/// batch-statistics adjoint, where the quotient has O(step²) truncation.
	Mode mode = Mode::Eval;
};

/// Relative error with denominator max(|a|, |b|, 1e-8).
inline double relative_error(double a, double b) {
	return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/**
 * Compares every analytic parameter partial of f(θ) = ⟨logits(θ), G⟩ against
 * central differences, for a fixed random output direction G. Analytic
 * gradients come from the float64 model; the difference quotients are
 * evaluated on an extended-precision copy holding the same parameter values,
 * so float64 rounding in f does not swamp small partials. Running statistics
 * are not parameters and are not checked.
 */
inline GradientCheckReport gradient_check(const Model<double>& model, const Tensor<double>& input,
		const GradientCheckOptions& opt = {}, const ParamGradHook<double>& hook = {}) {
	using Wide = long double;
	const Shape out_shape{input.dim(0), model.num_classes()};
	Tensor<double> direction(out_shape);
	{
		auto rng = keyed_engine(opt.seed, 0);
		std::normal_distribution<double> nd;
		for (auto& v : direction.data()) v = nd(rng);
	}

	Model<double> analytic_model = model;
	analytic_model.zero_grad();
	{
		const auto rec = forward(analytic_model, input, opt.mode);
		backward(analytic_model, rec, direction, hook);
	}

	Model<Wide> wide = model.template cast<Wide>();
	const Tensor<Wide> wide_direction = direction.template cast<Wide>();
	// Parameters are visited in node order; outputs of nodes before the
	// perturbed one are unperturbed and are reused in place.
	ForwardRecord<Wide> rec = forward(wide, input.template cast<Wide>(), opt.mode);
	auto objective = [&](std::size_t first_node) {
		rerun_from(wide, rec, first_node);
		Wide f = 0;
		for (std::size_t k = 0; k < wide_direction.size(); ++k) f += rec.logits()[k] * wide_direction[k];
		return f;
	};

	GradientCheckReport report;
	for (std::size_t i = 0; i < wide.size(); ++i) {
		auto& node = wide.node(i);
		const auto& an = analytic_model.node(i);
		struct Param {
			const char* name;
			Tensor<Wide>* value;
			const Tensor<double>* grad;
		};
		const Param params[] = {{"weight", &node.weight, &an.grad_weight},
				{"bias", &node.bias, &an.grad_bias},
				{"gamma", &node.gamma, &an.grad_gamma},
				{"beta", &node.beta, &an.grad_beta}};
		for (const auto& p : params) {
			if (p.value->empty()) continue;
			for (std::size_t k = 0; k < p.value->size(); ++k) {
				const Wide orig = (*p.value)[k];
				const Wide step = static_cast<Wide>(opt.step);
				(*p.value)[k] = orig + step;
				const Wide fp = objective(i);
				(*p.value)[k] = orig - step;
				const Wide fm = objective(i);
				(*p.value)[k] = orig;
				const double numeric = static_cast<double>((fp - fm) / (2 * step));
				const double err = relative_error((*p.grad)[k], numeric);
				++report.checked;
				if (err > report.max_rel_error) {
					report.max_rel_error = err;
					report.failing_node = static_cast<int>(i);
					report.failing_param = p.name;
					report.failing_index = k;
					report.analytic = (*p.grad)[k];
					report.numeric = numeric;
				}
			}
		}
		rerun_from(wide, rec, i);  // restore unperturbed outputs for later nodes
	}
	report.passed = report.max_rel_error < opt.tolerance;
	if (report.passed) {
		report.failing_node = -1;
		report.failing_param.clear();
	}
	return report;
}

}  // namespace chanprune

#endif  // CHANPRUNE_GRADIENT_CHECK_HPP_
