#pragma once

#include "arch.hpp"
#include "config_io.hpp"
#include "noc.hpp"
#include "task_graph.hpp"
#include "simulator.hpp"
#include "slice_plan.hpp"
#include "planner.hpp"
#include "functional.hpp"
#include "analytics.hpp"
#include "sweep.hpp"
#include "report.hpp"
