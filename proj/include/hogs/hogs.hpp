// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <hogs/common.hpp>
#include <hogs/geometry.hpp>
#include <hogs/rasterizer.hpp>
#include <hogs/field.hpp>
#include <hogs/loss.hpp>
#include <hogs/optimizer.hpp>
#include <hogs/densifier.hpp>
#include <hogs/warper.hpp>
#include <hogs/io.hpp>
#include <hogs/synth.hpp>
#include <hogs/trainer.hpp>
