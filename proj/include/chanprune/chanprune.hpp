#ifndef CHANPRUNE_CHANPRUNE_HPP_
#define CHANPRUNE_CHANPRUNE_HPP_

// Everything except the CLI front end (cli.hpp), which also needs CLI11.

#include "checkpoint.hpp"
#include "config.hpp"
#include "csv.hpp"
#include "data.hpp"
#include "engine.hpp"
#include "errors.hpp"
#include "experiment.hpp"
#include "gradient_check.hpp"
#include "importance.hpp"
#include "model.hpp"
#include "pruning.hpp"
#include "random.hpp"
#include "reference_models.hpp"
#include "tensor.hpp"
#include "train.hpp"

#endif  // CHANPRUNE_CHANPRUNE_HPP_
