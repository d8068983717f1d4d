// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "mlora/autodiff.hpp"
#include "mlora/data.hpp"
#include "mlora/error.hpp"
#include "mlora/eval.hpp"
#include "mlora/layers.hpp"
#include "mlora/models.hpp"
#include "mlora/params.hpp"
#include "mlora/random.hpp"
#include "mlora/training.hpp"
