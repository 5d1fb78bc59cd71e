#pragma once

#include "laco/analysis.hpp"
#include "laco/checkpoint.hpp"
#include "laco/checkpoint_io.hpp"
#include "laco/corpus.hpp"
#include "laco/error.hpp"
#include "laco/forward.hpp"
#include "laco/kernels.hpp"
#include "laco/merge.hpp"
#include "laco/parallel.hpp"
#include "laco/prune.hpp"
#include "laco/safetensors.hpp"
#include "laco/tensor.hpp"
#include "laco/toy.hpp"
