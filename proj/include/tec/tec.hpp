// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.
#pragma once

#include "tec/errors.hpp"
#include "tec/rng.hpp"
#include "tec/tensor.hpp"
#include "tec/ops.hpp"
#include "tec/grad_check.hpp"
#include "tec/nn.hpp"
#include "tec/vit.hpp"
#include "tec/masking.hpp"
#include "tec/targets.hpp"
#include "tec/adapters.hpp"
#include "tec/decoder.hpp"
#include "tec/losses.hpp"
#include "tec/optim.hpp"
#include "tec/checkpoint.hpp"
#include "tec/data.hpp"
#include "tec/trainer.hpp"
