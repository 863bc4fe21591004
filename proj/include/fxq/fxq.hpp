#pragma once

#include "fxq/autograd.hpp"
#include "fxq/bench.hpp"
#include "fxq/checkpoint.hpp"
#include "fxq/config.hpp"
#include "fxq/data.hpp"
#include "fxq/errors.hpp"
#include "fxq/fixedpoint.hpp"
#include "fxq/losses.hpp"
#include "fxq/ops.hpp"
#include "fxq/quant_layers.hpp"
#include "fxq/tensor.hpp"
#include "fxq/training.hpp"
#include "fxq/unet.hpp"
