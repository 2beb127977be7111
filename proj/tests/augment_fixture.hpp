#pragma once

// Hand-built six-clip video for the selection stages. Task steps 10, 11, 12.
//
//   clip  labels (k=2)        top-1 dot  in-task best  task position
//   0     12 .90, 30 .50      1.3        12            2
//   1     10 .80, 11 .60      1.1        10            0
//   2     30 .95, 11 .40      1.2        11            1
//   3     10 .70, 31 .20      0.9        10            0
//   4     11 .85, 10 .30      1.0        11            1
//   5     12 .75, 32 .10      1.5        12            2

#include "pivot/augment.hpp"

#include <vector>

namespace fixture {

inline pivot::TaskSpec six_clip_task() { return {7, "fixture task", {10, 11, 12}}; }

inline pivot::PseudoLabelSet six_clip_labels() {
    pivot::PseudoLabelSet s;
    s.per_clip = {{{12, .90}, {30, .50}}, {{10, .80}, {11, .60}}, {{30, .95}, {11, .40}},
                  {{10, .70}, {31, .20}}, {{11, .85}, {10, .30}}, {{12, .75}, {32, .10}}};
    return s;
}

inline std::vector<double> six_clip_dots() { return {1.3, 1.1, 1.2, 0.9, 1.0, 1.5}; }

// Stable sort by task position over all six clips.
inline std::vector<std::size_t> six_clip_sorted() { return {1, 3, 2, 4, 0, 5}; }
// Threshold at 1.0 keeps 0, 1, 2, 5 (clip 4 sits exactly on the threshold).
inline std::vector<std::size_t> six_clip_thresh_in_task_sorted() { return {1, 2, 0, 5}; }

} // namespace fixture
