#pragma once

#include "craft/core.hpp"
#include "craft/rng.hpp"
#include "craft/particles.hpp"
#include "craft/lattice.hpp"
#include "craft/targets.hpp"
#include "craft/flows.hpp"
#include "craft/mcmc.hpp"
#include "craft/smc.hpp"
#include "craft/training.hpp"
#include "craft/pimh.hpp"
