// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fftmoe/backbone.hpp"
#include "fftmoe/checkpoint.hpp"
#include "fftmoe/config.hpp"
#include "fftmoe/data.hpp"
#include "fftmoe/error.hpp"
#include "fftmoe/experiment.hpp"
#include "fftmoe/federation.hpp"
#include "fftmoe/losses.hpp"
#include "fftmoe/metrics.hpp"
#include "fftmoe/moe_adapter.hpp"
#include "fftmoe/optim.hpp"
#include "fftmoe/rng.hpp"
#include "fftmoe/tensor.hpp"
