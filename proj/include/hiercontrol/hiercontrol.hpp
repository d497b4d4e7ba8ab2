#pragma once

#include "analysis.hpp"
#include "config.hpp"
#include "io.hpp"
