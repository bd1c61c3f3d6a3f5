#pragma once

#include "xduct/alignment.hpp"
#include "xduct/batch.hpp"
#include "xduct/checkpoint.hpp"
#include "xduct/data.hpp"
#include "xduct/decode.hpp"
#include "xduct/errors.hpp"
#include "xduct/metrics.hpp"
#include "xduct/model.hpp"
#include "xduct/ops.hpp"
#include "xduct/optim.hpp"
#include "xduct/rng.hpp"
#include "xduct/sequence_nets.hpp"
#include "xduct/tensor.hpp"
#include "xduct/training.hpp"
#include "xduct/vocab.hpp"
