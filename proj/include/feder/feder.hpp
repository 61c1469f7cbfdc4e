#pragma once

#include "feder/data.hpp"
#include "feder/error.hpp"
#include "feder/experiment.hpp"
#include "feder/federation.hpp"
#include "feder/linalg.hpp"
#include "feder/metrics.hpp"
#include "feder/nn.hpp"
#include "feder/params.hpp"
#include "feder/report.hpp"
