#pragma once

// Single include for the whole library.

#include "fedmiss/datamodel.hpp"
#include "fedmiss/errors.hpp"
#include "fedmiss/estimators.hpp"
#include "fedmiss/fedproto.hpp"
#include "fedmiss/missingness.hpp"
#include "fedmiss/numerics.hpp"
#include "fedmiss/rng.hpp"
#include "fedmiss/simharness.hpp"
#include "fedmiss/variance.hpp"
#include "fedmiss/weights.hpp"
