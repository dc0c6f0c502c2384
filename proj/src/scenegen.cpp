#include "lmdet/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "lmdet/error.hpp"

namespace lmdet {

const char* shape_word(ShapeKind s) {
  switch (s) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
  }
  return "?";
}

const char* color_word(ColorKind c) {
  switch (c) {
    case ColorKind::Red: return "red";
    case ColorKind::Green: return "green";
    case ColorKind::Blue: return "blue";
    case ColorKind::Yellow: return "yellow";
  }
  return "?";
}

const char* size_word(SizeKind s) { return s == SizeKind::Small ? "small" : "large"; }

namespace {

constexpr uint8_t kBackground[3] = {235, 235, 235};

void color_rgb(ColorKind c, uint8_t out[3]) {
  switch (c) {
    case ColorKind::Red: out[0] = 200; out[1] = 40; out[2] = 40; return;
    case ColorKind::Green: out[0] = 40; out[1] = 160; out[2] = 40; return;
    case ColorKind::Blue: out[0] = 40; out[1] = 60; out[2] = 200; return;
    case ColorKind::Yellow: out[0] = 230; out[1] = 200; out[2] = 30; return;
  }
}

bool warm_color(ColorKind c) { return c == ColorKind::Red || c == ColorKind::Yellow; }

}  // namespace

Scene generate_scene(Rng& rng, i64 image_size) {
  Scene scene;
  scene.image_size = image_size;
  const int count = 1 + int(rng.randint(4));
  const double margin = 1.0 / double(image_size);
  for (int i = 0; i < count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      SceneObject obj;
      obj.shape = ShapeKind(rng.randint(3));
      obj.color = ColorKind(rng.randint(4));
      obj.size = SizeKind(rng.randint(2));
      const double extent = obj.size == SizeKind::Small ? rng.uniform(0.14, 0.22)
                                                        : rng.uniform(0.28, 0.35);
      obj.box.w = obj.box.h = extent;
      obj.box.cx = rng.uniform(extent / 2 + margin, 1.0 - extent / 2 - margin);
      obj.box.cy = rng.uniform(extent / 2 + margin, 1.0 - extent / 2 - margin);
      bool ok = true;
      for (const auto& other : scene.objects) {
        if (other.shape == obj.shape && other.color == obj.color) ok = false;
        else if (iou(other.box, obj.box) > 0.1) ok = false;
        if (!ok) break;
      }
      if (ok) {
        scene.objects.push_back(obj);
        placed = true;
      }
    }
    require(placed, "generate_scene: placement failed after 100 retries (scene too crowded)");
  }
  return scene;
}

Image render(const Scene& scene) {
  const i64 S = scene.image_size;
  Image img(S, S, kBackground[0], kBackground[1], kBackground[2]);
  for (const auto& obj : scene.objects) {
    uint8_t rgb[3];
    color_rgb(obj.color, rgb);
    const Corners c = to_corners(obj.box);
    const double x1 = c[0] * double(S), y1 = c[1] * double(S);
    const double x2 = c[2] * double(S), y2 = c[3] * double(S);
    const double cx = obj.box.cx * double(S), cy = obj.box.cy * double(S);
    const double r = obj.box.w * double(S) / 2.0;
    const i64 px0 = std::max<i64>(0, i64(std::floor(x1)));
    const i64 px1 = std::min<i64>(S - 1, i64(std::ceil(x2)));
    const i64 py0 = std::max<i64>(0, i64(std::floor(y1)));
    const i64 py1 = std::min<i64>(S - 1, i64(std::ceil(y2)));
    for (i64 y = py0; y <= py1; ++y)
      for (i64 x = px0; x <= px1; ++x) {
        const double px = double(x) + 0.5, py = double(y) + 0.5;
        bool inside = false;
        switch (obj.shape) {
          case ShapeKind::Circle:
            inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
            break;
          case ShapeKind::Square:
            inside = px >= x1 && px <= x2 && py >= y1 && py <= y2;
            break;
          case ShapeKind::Triangle: {
            // isoceles: apex top-centre, base at the bottom edge
            if (py >= y1 && py <= y2) {
              const double half = (y2 - y1) <= 0 ? 0 : (r * (py - y1) / (y2 - y1));
              inside = std::abs(px - cx) <= half;
            }
            break;
          }
        }
        if (inside) {
          uint8_t* p = img.at(x, y);
          p[0] = rgb[0];
          p[1] = rgb[1];
          p[2] = rgb[2];
        }
      }
  }
  return img;
}

std::vector<std::string> all_category_names() { return {"circle", "square", "triangle"}; }

namespace {

using Pred = std::function<bool(const SceneObject&)>;

std::vector<int> match_all(const Scene& scene, const Pred& pred) {
  std::vector<int> out;
  for (size_t i = 0; i < scene.objects.size(); ++i)
    if (pred(scene.objects[i])) out.push_back(int(i));
  return out;
}

void add_candidate(std::vector<CaptionCandidate>& out, const Scene& scene, std::string phrase,
                   const Pred& pred) {
  out.push_back({std::move(phrase), match_all(scene, pred)});
}

// spatial relation with a clear margin so relations are visually unambiguous
constexpr double kRelMargin = 0.08;

}  // namespace

std::vector<CaptionCandidate> rec_caption_candidates(const Scene& scene, int target) {
  const SceneObject& t = scene.objects[size_t(target)];
  std::vector<CaptionCandidate> out;
  const std::string color = color_word(t.color), shape = shape_word(t.shape);
  const std::string size = size_word(t.size);
  add_candidate(out, scene, "the " + color + " " + shape,
                [&](const SceneObject& o) { return o.color == t.color && o.shape == t.shape; });
  add_candidate(out, scene, "the " + size + " " + color + " " + shape, [&](const SceneObject& o) {
    return o.color == t.color && o.shape == t.shape && o.size == t.size;
  });
  add_candidate(out, scene, "the " + shape,
                [&](const SceneObject& o) { return o.shape == t.shape; });
  add_candidate(out, scene, "the " + color + " object",
                [&](const SceneObject& o) { return o.color == t.color; });
  add_candidate(out, scene, "the " + size + " " + shape,
                [&](const SceneObject& o) { return o.shape == t.shape && o.size == t.size; });
  // relational phrases against an anchor that is itself unique by color+shape
  for (size_t a = 0; a < scene.objects.size(); ++a) {
    if (int(a) == target) continue;
    const SceneObject& anchor = scene.objects[a];
    const auto anchor_matches = match_all(scene, [&](const SceneObject& o) {
      return o.color == anchor.color && o.shape == anchor.shape;
    });
    if (anchor_matches.size() != 1) continue;
    const std::string anchor_phrase =
        std::string(color_word(anchor.color)) + " " + shape_word(anchor.shape);
    struct Rel {
      const char* word;
      bool (*holds)(const Box&, const Box&);
    };
    static const Rel rels[] = {
        {"left", [](const Box& o, const Box& a2) { return o.cx < a2.cx - kRelMargin; }},
        {"right", [](const Box& o, const Box& a2) { return o.cx > a2.cx + kRelMargin; }},
        {"above", [](const Box& o, const Box& a2) { return o.cy < a2.cy - kRelMargin; }},
        {"below", [](const Box& o, const Box& a2) { return o.cy > a2.cy + kRelMargin; }},
    };
    for (const auto& rel : rels) {
      if (!rel.holds(t.box, anchor.box)) continue;
      const std::string joiner = (rel.word == std::string("left") || rel.word == std::string("right"))
                                     ? std::string(rel.word) + " of "
                                     : std::string(rel.word) + " ";
      add_candidate(out, scene, "the " + shape + " " + joiner + "the " + anchor_phrase,
                    [&, rel](const SceneObject& o) {
                      return o.shape == t.shape && rel.holds(o.box, anchor.box);
                    });
    }
  }
  return out;
}

std::vector<CaptionCandidate> rd_phrase_candidates(const Scene& scene, int target) {
  const SceneObject& t = scene.objects[size_t(target)];
  std::vector<CaptionCandidate> out;
  const std::string colorclass = warm_color(t.color) ? "warm-colored" : "cool-colored";
  const Pred colorpred = [&](const SceneObject& o) { return warm_color(o.color) == warm_color(t.color); };
  const char* cornerword = t.shape == ShapeKind::Circle   ? "no"
                           : t.shape == ShapeKind::Triangle ? "three"
                                                            : "four";
  const Pred shapepred = [&](const SceneObject& o) { return o.shape == t.shape; };
  const std::string sizeclass = t.size == SizeKind::Large ? "big" : "little";
  const Pred sizepred = [&](const SceneObject& o) { return o.size == t.size; };

  add_candidate(out, scene, "the " + colorclass + " object", colorpred);
  add_candidate(out, scene, "the object with " + std::string(cornerword) + " corners", shapepred);
  if (t.shape == ShapeKind::Circle) add_candidate(out, scene, "the round object", shapepred);
  add_candidate(out, scene, "the " + sizeclass + " object", sizepred);
  add_candidate(out, scene, "the " + colorclass + " object with " + cornerword + " corners",
                [&](const SceneObject& o) { return colorpred(o) && shapepred(o); });
  add_candidate(out, scene, "the " + sizeclass + " " + colorclass + " object",
                [&](const SceneObject& o) { return sizepred(o) && colorpred(o); });
  return out;
}

namespace {

RawAnnotation make_od(const Scene& scene, Rng& rng) {
  RawAnnotation raw;
  raw.data_type = DataType::Od;
  std::vector<std::string> present;
  for (const auto& o : scene.objects) {
    const std::string name = shape_word(o.shape);
    if (std::find(present.begin(), present.end(), name) == present.end()) present.push_back(name);
  }
  raw.category = rng.choice(present);
  for (const auto& o : scene.objects)
    if (shape_word(o.shape) == raw.category) raw.gt_boxes.push_back(o.box);
  return raw;
}

bool pick_unique_caption(const std::vector<CaptionCandidate>& candidates, int target, Rng& rng,
                         std::string& out) {
  std::vector<const CaptionCandidate*> unique;
  for (const auto& c : candidates)
    if (c.matches.size() == 1 && c.matches[0] == target) unique.push_back(&c);
  if (unique.empty()) return false;
  out = unique[size_t(rng.randint(i64(unique.size())))]->phrase;
  return true;
}

bool make_rec(const Scene& scene, Rng& rng, RawAnnotation& raw) {
  const int target = int(rng.randint(i64(scene.objects.size())));
  raw.data_type = DataType::Rec;
  if (!pick_unique_caption(rec_caption_candidates(scene, target), target, rng, raw.caption))
    return false;
  raw.gt_boxes = {scene.objects[size_t(target)].box};
  return true;
}

bool make_rd(const Scene& scene, Rng& rng, bool long_form, RawAnnotation& raw) {
  // try a few targets; implicit phrases often resolve for only some objects
  for (int attempt = 0; attempt < 8; ++attempt) {
    const int target = int(rng.randint(i64(scene.objects.size())));
    std::string phrase;
    if (!pick_unique_caption(rd_phrase_candidates(scene, target), target, rng, phrase)) continue;
    const SceneObject& t = scene.objects[size_t(target)];
    raw.gt_boxes = {t.box};
    if (!long_form) {
      raw.data_type = DataType::RdShort;
      raw.caption = phrase;
      return true;
    }
    raw.data_type = DataType::RdLong;
    static const char* wrappers[][2] = {
        {"I am looking for ", " in this picture."},
        {"Please help me find ", " here."},
        {"I need ", " for my task."},
    };
    const auto& w = wrappers[rng.randint(3)];
    raw.question = w[0] + phrase + w[1];
    raw.reason = std::string("it is the ") + color_word(t.color) + " " + shape_word(t.shape);
    return true;
  }
  return false;
}

RawAnnotation make_vqa(const Scene& scene, Rng& rng) {
  RawAnnotation raw;
  raw.data_type = DataType::Vqa;
  static const char* shape_names[] = {"circle", "square", "triangle"};
  for (int attempt = 0;; ++attempt) {
    switch (rng.randint(6)) {
      case 0: {  // count one shape kind
        const char* name = shape_names[rng.randint(3)];
        int n = 0;
        for (const auto& o : scene.objects)
          if (shape_word(o.shape) == std::string(name)) ++n;
        raw.vqa_question = std::string("How many ") + name + " shapes are in this image?";
        if (n == 0) raw.vqa_answer = std::string("There are no ") + name + " shapes .";
        else if (n == 1) raw.vqa_answer = std::string("There is 1 ") + name + " shape .";
        else raw.vqa_answer = "There are " + std::to_string(n) + " " + name + " shapes .";
        return raw;
      }
      case 1: {  // count everything
        const int n = int(scene.objects.size());
        raw.vqa_question = "How many objects are in this image?";
        raw.vqa_answer = n == 1 ? std::string("There is 1 object .")
                                : "There are " + std::to_string(n) + " objects .";
        return raw;
      }
      case 2: {  // color of a unique shape
        const int target = int(rng.randint(i64(scene.objects.size())));
        const SceneObject& t = scene.objects[size_t(target)];
        int same = 0;
        for (const auto& o : scene.objects)
          if (o.shape == t.shape) ++same;
        if (same != 1 && attempt < 8) continue;
        if (same != 1) break;
        raw.vqa_question = std::string("What color is the ") + shape_word(t.shape) + "?";
        raw.vqa_answer = std::string("It is ") + color_word(t.color) + " .";
        return raw;
      }
      case 3: {  // colour-class knowledge; grounds the rd lexicon in language
        if (rng.bernoulli(0.5)) {
          raw.vqa_question = "Which colors are warm colors?";
          raw.vqa_answer = "The warm colors are red and yellow .";
        } else {
          raw.vqa_question = "Which colors are cool colors?";
          raw.vqa_answer = "The cool colors are blue and green .";
        }
        return raw;
      }
      case 4: {  // corner-count knowledge
        const int s = int(rng.randint(3));
        raw.vqa_question = std::string("How many corners does a ") + shape_names[s] + " have?";
        if (s == 0) raw.vqa_answer = "A circle has no corners .";
        else if (s == 1) raw.vqa_answer = "A square has four corners .";
        else raw.vqa_answer = "A triangle has three corners .";
        return raw;
      }
      default: {  // warm-or-cool per colour
        static const char* colors[] = {"red", "green", "blue", "yellow"};
        const int c = int(rng.randint(4));
        raw.vqa_question = std::string("Is a ") + colors[c] + " object warm-colored or cool-colored?";
        const bool warm = c == 0 || c == 3;
        raw.vqa_answer =
            std::string("A ") + colors[c] + " object is " + (warm ? "warm-colored" : "cool-colored") + " .";
        return raw;
      }
    }
  }
}

}  // namespace

std::vector<RawAnnotation> make_samples(const Scene& scene, const std::vector<double>& mix,
                                        Rng& rng, int n) {
  require(mix.size() == 5, "make_samples: mix must have 5 weights (od, rec, rd_short, rd_long, vqa)");
  double total = 0;
  for (double w : mix) {
    require(w >= 0, "make_samples: negative mix weight");
    total += w;
  }
  require(std::abs(total - 1.0) < 1e-6, "make_samples: mix weights must sum to 1");

  std::vector<RawAnnotation> out;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    double acc = 0;
    int type = 4;
    for (int k = 0; k < 5; ++k) {
      acc += mix[size_t(k)];
      if (u < acc) {
        type = k;
        break;
      }
    }
    RawAnnotation raw;
    bool ok = true;
    switch (type) {
      case 0: raw = make_od(scene, rng); break;
      case 1: ok = make_rec(scene, rng, raw); break;
      case 2: ok = make_rd(scene, rng, false, raw); break;
      case 3: ok = make_rd(scene, rng, true, raw); break;
      default: raw = make_vqa(scene, rng); break;
    }
    if (ok) out.push_back(std::move(raw));
  }
  return out;
}

}  // namespace lmdet
