#pragma once

namespace sambd {

// Keeps large tensor buffers on the heap instead of returning them to the
// kernel after every free. Process-wide; call once from main.
void tune_allocator();

}  // namespace sambd
