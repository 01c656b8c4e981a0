#pragma once

#include "lplp/adam.hpp"
#include "lplp/autodiff.hpp"
#include "lplp/bagdata.hpp"
#include "lplp/checkpoint.hpp"
#include "lplp/dataset_io.hpp"
#include "lplp/error.hpp"
#include "lplp/experiment.hpp"
#include "lplp/grad_check.hpp"
#include "lplp/gradcheck_suite.hpp"
#include "lplp/llp.hpp"
#include "lplp/metrics.hpp"
#include "lplp/mil.hpp"
#include "lplp/nets.hpp"
#include "lplp/trainer.hpp"
