// Copyright 2026 The pipesgd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================

#pragma once

#include "pipesgd/collective.hpp"
#include "pipesgd/common.hpp"
#include "pipesgd/compression.hpp"
#include "pipesgd/engine.hpp"
#include "pipesgd/harness/calibrate.hpp"
#include "pipesgd/harness/charts.hpp"
#include "pipesgd/harness/config.hpp"
#include "pipesgd/harness/csv.hpp"
#include "pipesgd/harness/experiment.hpp"
#include "pipesgd/harness/predict.hpp"
#include "pipesgd/inproc_transport.hpp"
#include "pipesgd/mnist.hpp"
#include "pipesgd/numerics.hpp"
#include "pipesgd/tcp_transport.hpp"
#include "pipesgd/timing_model.hpp"
#include "pipesgd/transport.hpp"
