#pragma once

// Umbrella header.

#include "nsmrg/core.hpp"
#include "nsmrg/nn.hpp"
#include "nsmrg/logic.hpp"
#include "nsmrg/generation.hpp"
#include "nsmrg/model.hpp"
#include "nsmrg/world.hpp"
#include "nsmrg/active.hpp"
#include "nsmrg/checkpoint.hpp"
#include "nsmrg/training.hpp"
#include "nsmrg/orchestrator.hpp"
#include "nsmrg/service.hpp"
