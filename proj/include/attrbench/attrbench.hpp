#pragma once

// Everything at once. Individual headers can be included on their own.

#include "attrbench/attribution.hpp"
#include "attrbench/autodiff.hpp"
#include "attrbench/config.hpp"
#include "attrbench/correlation.hpp"
#include "attrbench/dataset.hpp"
#include "attrbench/error.hpp"
#include "attrbench/idx.hpp"
#include "attrbench/masking.hpp"
#include "attrbench/metrics.hpp"
#include "attrbench/model.hpp"
#include "attrbench/model_io.hpp"
#include "attrbench/parallel.hpp"
#include "attrbench/patch.hpp"
#include "attrbench/pipeline.hpp"
#include "attrbench/random.hpp"
#include "attrbench/report.hpp"
#include "attrbench/segmentation.hpp"
#include "attrbench/stats.hpp"
#include "attrbench/synthetic.hpp"
#include "attrbench/tensor.hpp"
#include "attrbench/training.hpp"
