#pragma once

#include "mgslab/autodiff.hpp"
#include "mgslab/config.hpp"
#include "mgslab/container.hpp"
#include "mgslab/datasets.hpp"
#include "mgslab/differentiation.hpp"
#include "mgslab/error.hpp"
#include "mgslab/graph.hpp"
#include "mgslab/kernel.hpp"
#include "mgslab/linalg.hpp"
#include "mgslab/models.hpp"
#include "mgslab/regularisers.hpp"
#include "mgslab/rng.hpp"
#include "mgslab/tensor.hpp"
#include "mgslab/trainer.hpp"
