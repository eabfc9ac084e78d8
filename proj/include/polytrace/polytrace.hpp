#pragma once

#include "polytrace/adversary.hpp"
#include "polytrace/checkpoint.hpp"
#include "polytrace/cli.hpp"
#include "polytrace/config.hpp"
#include "polytrace/data.hpp"
#include "polytrace/evaluation.hpp"
#include "polytrace/fusion.hpp"
#include "polytrace/generator.hpp"
#include "polytrace/losses.hpp"
#include "polytrace/training.hpp"
