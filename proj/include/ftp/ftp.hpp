// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header: the whole library.
#pragma once

#include "ftp/analysis.hpp"
#include "ftp/checkpoint.hpp"
#include "ftp/corpus.hpp"
#include "ftp/errors.hpp"
#include "ftp/evaluation.hpp"
#include "ftp/flops.hpp"
#include "ftp/model.hpp"
#include "ftp/ops.hpp"
#include "ftp/optim.hpp"
#include "ftp/pipeline.hpp"
#include "ftp/pretrain.hpp"
#include "ftp/router_training.hpp"
#include "ftp/routing.hpp"
#include "ftp/scheduler.hpp"
#include "ftp/serialize.hpp"
#include "ftp/sparsity.hpp"
#include "ftp/tensor.hpp"
