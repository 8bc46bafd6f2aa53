#pragma once

#include "aanet/activations.hpp"
#include "aanet/checkpoint.hpp"
#include "aanet/ctc.hpp"
#include "aanet/dataset.hpp"
#include "aanet/error.hpp"
#include "aanet/evaluation.hpp"
#include "aanet/features.hpp"
#include "aanet/harness.hpp"
#include "aanet/model.hpp"
#include "aanet/numeric.hpp"
#include "aanet/training.hpp"
