// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mst/attention.hpp"
#include "mst/autodiff.hpp"
#include "mst/checkpoint.hpp"
#include "mst/config.hpp"
#include "mst/data.hpp"
#include "mst/errors.hpp"
#include "mst/flops.hpp"
#include "mst/mask.hpp"
#include "mst/model.hpp"
#include "mst/optim.hpp"
#include "mst/rng.hpp"
#include "mst/schedules.hpp"
#include "mst/tensor.hpp"
#include "mst/topology.hpp"
#include "mst/trainer.hpp"
