#pragma once

#include "darl/ad.hpp"
#include "darl/config.hpp"
#include "darl/divergence.hpp"
#include "darl/domain.hpp"
#include "darl/grammar.hpp"
#include "darl/grpo.hpp"
#include "darl/io.hpp"
#include "darl/policy.hpp"
#include "darl/task.hpp"
#include "darl/trainer.hpp"
#include "darl/verify.hpp"
