#pragma once

// Umbrella header.

#include "metaspike/autodiff.hpp"
#include "metaspike/checkpoint.hpp"
#include "metaspike/config.hpp"
#include "metaspike/episodes.hpp"
#include "metaspike/errors.hpp"
#include "metaspike/events.hpp"
#include "metaspike/experiments.hpp"
#include "metaspike/meta.hpp"
#include "metaspike/metrics.hpp"
#include "metaspike/rng.hpp"
#include "metaspike/snn.hpp"
#include "metaspike/tensor.hpp"
