#pragma once

#include "basinproj/adam.hpp"
#include "basinproj/blend.hpp"
#include "basinproj/cli.hpp"
#include "basinproj/cma.hpp"
#include "basinproj/core.hpp"
#include "basinproj/image_io.hpp"
#include "basinproj/losses.hpp"
#include "basinproj/project.hpp"
#include "basinproj/serialize.hpp"
#include "basinproj/toygen.hpp"
#include "basinproj/transforms.hpp"
