// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maemi/error.hpp"
#include "maemi/tensor.hpp"
#include "maemi/adapter.hpp"
#include "maemi/layers.hpp"
#include "maemi/image.hpp"
#include "maemi/vision.hpp"
#include "maemi/tokenizer.hpp"
#include "maemi/fusion.hpp"
#include "maemi/checkpoint.hpp"
#include "maemi/trainer.hpp"
#include "maemi/synthetic.hpp"
#include "maemi/metrics.hpp"
#include "maemi/datagen.hpp"
#include "maemi/config.hpp"
#include "maemi/gradcheck.hpp"
