#pragma once

#include "saliency/tensor.hpp"
#include "saliency/nn.hpp"
#include "saliency/extract.hpp"
#include "saliency/aggregate.hpp"
#include "saliency/multilayer.hpp"
#include "saliency/metasal.hpp"
#include "saliency/dataset.hpp"
#include "saliency/model_io.hpp"
#include "saliency/image_io.hpp"
#include "saliency/eval.hpp"
#include "saliency/gradcheck.hpp"
