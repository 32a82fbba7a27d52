// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace metrolab {

using TokenId = std::int32_t;
using Shape = std::vector<std::size_t>;

}  // namespace metrolab
