#pragma once

#include "kq/error.hpp"
#include "kq/grid.hpp"
#include "kq/numeric.hpp"
#include "kq/toric.hpp"
#include "kq/quantize.hpp"
#include "kq/domain.hpp"
#include "kq/convex_envelope.hpp"
#include "kq/hcma.hpp"
#include "kq/griffiths.hpp"
#include "kq/io.hpp"
#include "kq/harness.hpp"
