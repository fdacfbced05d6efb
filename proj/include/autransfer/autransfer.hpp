#pragma once

// Umbrella header for the whole library.

#include "autransfer/calibration.hpp"
#include "autransfer/data.hpp"
#include "autransfer/errors.hpp"
#include "autransfer/losses.hpp"
#include "autransfer/metrics.hpp"
#include "autransfer/model.hpp"
#include "autransfer/rng.hpp"
#include "autransfer/tensor.hpp"
#include "autransfer/textio.hpp"
#include "autransfer/training.hpp"
