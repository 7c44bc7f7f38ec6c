// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dff/error.hpp"
#include "dff/rng.hpp"
#include "dff/tensor.hpp"
#include "dff/ops.hpp"
#include "dff/gradcheck.hpp"
#include "dff/serialize.hpp"
#include "dff/backbone.hpp"
#include "dff/adapter.hpp"
#include "dff/fusion.hpp"
#include "dff/data.hpp"
#include "dff/optim.hpp"
#include "dff/trainer.hpp"
#include "dff/metrics.hpp"
#include "dff/runspec.hpp"
#include "dff/commands.hpp"
