#pragma once

#include "fedod/fedcore/client.hpp"
#include "fedod/fedcore/fedavg.hpp"
#include "fedod/fedcore/federation.hpp"
#include "fedod/fedcore/protocol.hpp"
#include "fedod/fedcore/server.hpp"
#include "fedod/fedcore/transport.hpp"
