#pragma once

#include "festa/errors.hpp"
#include "festa/random.hpp"
#include "festa/geometry.hpp"
#include "festa/neural.hpp"
#include "festa/gradcheck.hpp"
#include "festa/attention.hpp"
#include "festa/network.hpp"
#include "festa/synthdata.hpp"
#include "festa/evalbench.hpp"
#include "festa/gradsuite.hpp"
