#pragma once

namespace gadt3 {

// Keeps large tensor buffers on the heap instead of fresh mmap pages. Training
// allocates and frees many multi-megabyte matrices per step; without this the
// page-fault cost is a large share of runtime. No-op off glibc.
void tune_allocator();

}  // namespace gadt3
