#pragma once

#include "lle/codec.hpp"
#include "lle/dataset.hpp"
#include "lle/downstream.hpp"
#include "lle/error.hpp"
#include "lle/harness.hpp"
#include "lle/image.hpp"
#include "lle/isp.hpp"
#include "lle/parallel.hpp"
#include "lle/predictor.hpp"
#include "lle/rng.hpp"
