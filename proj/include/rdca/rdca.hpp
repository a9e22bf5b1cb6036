#pragma once

#include "rdca/core.hpp"
#include "rdca/cache_pool.hpp"
#include "rdca/flow_control.hpp"
#include "rdca/recycle.hpp"
#include "rdca/escape.hpp"
#include "rdca/hostnet.hpp"
#include "rdca/metrics.hpp"
#include "rdca/sim.hpp"
#include "rdca/sizing.hpp"
#include "rdca/scenario_io.hpp"
