#pragma once

namespace carry {

// Keeps large tensor buffers on the heap instead of fresh mmaps so repeated
// training steps do not page-fault every allocation. Safe to call repeatedly.
void tune_allocator();

}  // namespace carry
