#pragma once

#include "fedod/fedctl/commands.hpp"
#include "fedod/fedctl/config.hpp"
#include "fedod/fedctl/layout.hpp"
#include "fedod/fedctl/report.hpp"
