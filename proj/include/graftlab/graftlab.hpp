#pragma once

#include "graftlab/checkpoint.hpp"
#include "graftlab/datagen.hpp"
#include "graftlab/error.hpp"
#include "graftlab/eval.hpp"
#include "graftlab/experiment.hpp"
#include "graftlab/grafting.hpp"
#include "graftlab/model.hpp"
#include "graftlab/random.hpp"
#include "graftlab/tensor.hpp"
#include "graftlab/trainer.hpp"
#include "graftlab/util.hpp"
