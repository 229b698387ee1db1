#pragma once

#include "nmod/error.hpp"
#include "nmod/rng.hpp"
#include "nmod/params.hpp"
#include "nmod/typesys.hpp"
#include "nmod/tensor.hpp"
#include "nmod/kernels.hpp"
#include "nmod/module.hpp"
#include "nmod/graph.hpp"
#include "nmod/backend.hpp"
#include "nmod/data.hpp"
#include "nmod/checkpoint.hpp"
#include "nmod/optim.hpp"
#include "nmod/runtime.hpp"
#include "nmod/collection.hpp"
#include "nmod/graph_io.hpp"
