#pragma once

#include "aggregation.hpp"
#include "diagnostics.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "numeric.hpp"
#include "report.hpp"
#include "rng.hpp"
#include "synthetic.hpp"
#include "trace.hpp"
#include "trace_io.hpp"
