#pragma once

#include "attention.hpp"
#include "bench.hpp"
#include "golden.hpp"
#include "prune.hpp"
#include "quant.hpp"
#include "stream_cache.hpp"
#include "tensor.hpp"
#include "workload.hpp"
