#pragma once

#include "gcl4sr/autodiff.hpp"
#include "gcl4sr/checkpoint.hpp"
#include "gcl4sr/config.hpp"
#include "gcl4sr/corpus.hpp"
#include "gcl4sr/error.hpp"
#include "gcl4sr/evalkit.hpp"
#include "gcl4sr/model.hpp"
#include "gcl4sr/objectives.hpp"
#include "gcl4sr/rng.hpp"
#include "gcl4sr/tensor.hpp"
#include "gcl4sr/trainer.hpp"
#include "gcl4sr/witg.hpp"
