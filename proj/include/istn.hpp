#pragma once

#include "istn/checkpoint.hpp"
#include "istn/common.hpp"
#include "istn/dataset.hpp"
#include "istn/distance.hpp"
#include "istn/eval.hpp"
#include "istn/experiment.hpp"
#include "istn/hash.hpp"
#include "istn/image.hpp"
#include "istn/losses.hpp"
#include "istn/networks.hpp"
#include "istn/nn.hpp"
#include "istn/pipeline.hpp"
#include "istn/plot.hpp"
#include "istn/refine.hpp"
#include "istn/synthdata.hpp"
#include "istn/training.hpp"
#include "istn/transform.hpp"
