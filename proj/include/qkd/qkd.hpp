#pragma once

#include "qkd/channel.hpp"
#include "qkd/config.hpp"
#include "qkd/event_io.hpp"
#include "qkd/pipeline.hpp"
#include "qkd/postproc.hpp"
#include "qkd/random.hpp"
#include "qkd/receiver.hpp"
#include "qkd/report.hpp"
#include "qkd/sync.hpp"
#include "qkd/transmitter.hpp"
#include "qkd/types.hpp"
