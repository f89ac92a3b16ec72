#pragma once

#include "algm/analysis.hpp"
#include "algm/calibrate.hpp"
#include "algm/config.hpp"
#include "algm/cost.hpp"
#include "algm/errors.hpp"
#include "algm/format.hpp"
#include "algm/image.hpp"
#include "algm/merge.hpp"
#include "algm/numkernel.hpp"
#include "algm/run_config.hpp"
#include "algm/token_set.hpp"
#include "algm/vit.hpp"
#include "algm/weights.hpp"
