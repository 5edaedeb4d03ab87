#pragma once

#include "recat/numerics/gradcheck.hpp"
#include "recat/numerics/layers.hpp"
#include "recat/numerics/ops.hpp"
#include "recat/numerics/parameter.hpp"
#include "recat/numerics/stable.hpp"
#include "recat/numerics/tape.hpp"
#include "recat/numerics/tensor.hpp"
