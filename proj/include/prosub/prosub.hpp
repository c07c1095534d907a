#pragma once

#include "prosub/arch.hpp"
#include "prosub/checkpoint.hpp"
#include "prosub/data.hpp"
#include "prosub/errors.hpp"
#include "prosub/fuse.hpp"
#include "prosub/graph.hpp"
#include "prosub/noise.hpp"
#include "prosub/pipeline.hpp"
#include "prosub/pool.hpp"
#include "prosub/ranking.hpp"
#include "prosub/report.hpp"
#include "prosub/runtime.hpp"
#include "prosub/search.hpp"
#include "prosub/subnet.hpp"
#include "prosub/tensor.hpp"
#include "prosub/train.hpp"
