#pragma once

#include <string>
#include <vector>

#include "lmdet/image.hpp"
#include "lmdet/rng.hpp"
#include "lmdet/text.hpp"

namespace lmdet {

enum class ShapeKind { Circle, Square, Triangle };
enum class ColorKind { Red, Green, Blue, Yellow };
enum class SizeKind { Small, Large };

const char* shape_word(ShapeKind s);
const char* color_word(ColorKind c);
const char* size_word(SizeKind s);

struct SceneObject {
  ShapeKind shape;
  ColorKind color;
  SizeKind size;
  Box box;  // w == h
};

// 1-4 colored shapes on a plain background. No two objects share
// (shape, color), and object boxes pairwise overlap with IoU <= 0.1, so
// attribute captions always have an unambiguous referent.
struct Scene {
  i64 image_size = 64;
  std::vector<SceneObject> objects;
};

Scene generate_scene(Rng& rng, i64 image_size = 64);

Image render(const Scene& scene);

// All category (shape) names the OD stream can reference.
std::vector<std::string> all_category_names();

// Draws n data types from the mix (od, rec, rd_short, rd_long, vqa weights,
// summing to 1) and builds one raw annotation each. Annotations whose caption
// cannot uniquely resolve are skipped, so fewer than n may come back.
std::vector<RawAnnotation> make_samples(const Scene& scene, const std::vector<double>& mix,
                                        Rng& rng, int n = 1);

// Exhaustive attribute matcher used by generation and by tests: the number of
// scene objects a caption's predicate matches. Kept independent of caption
// string parsing; candidates carry their own predicate.
struct CaptionCandidate {
  std::string phrase;
  std::vector<int> matches;  // indices of matching objects
};

std::vector<CaptionCandidate> rec_caption_candidates(const Scene& scene, int target);
std::vector<CaptionCandidate> rd_phrase_candidates(const Scene& scene, int target);

}  // namespace lmdet
