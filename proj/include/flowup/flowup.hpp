#pragma once

// Everything: tensors and autograd, convex and attention upsamplers, the
// flow pipeline stub, synthetic data, training, evaluation and file formats.

#include "flowup/tensor.hpp"
#include "flowup/ops.hpp"
#include "flowup/nn.hpp"
#include "flowup/convex_upsample.hpp"
#include "flowup/neighborhood_attention.hpp"
#include "flowup/tcu.hpp"
#include "flowup/representability.hpp"
#include "flowup/pipeline.hpp"
#include "flowup/synthesis.hpp"
#include "flowup/evaluation.hpp"
#include "flowup/training.hpp"
#include "flowup/io.hpp"
#include "flowup/gradcheck.hpp"
