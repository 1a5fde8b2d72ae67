#include <catch2/catch_amalgamated.hpp>

#include "mcomp/autograd.hpp"
#include "mcomp/checkpoint.hpp"
#include "mcomp/cli.hpp"
#include "mcomp/codec.hpp"
#include "mcomp/datagen.hpp"
#include "mcomp/embedding.hpp"
#include "mcomp/eval.hpp"
#include "mcomp/image.hpp"
#include "mcomp/layout.hpp"
#include "mcomp/losses.hpp"
#include "mcomp/png_io.hpp"
#include "mcomp/rng.hpp"
#include "mcomp/sampler.hpp"
#include "mcomp/schedule.hpp"
#include "mcomp/shapes.hpp"
#include "mcomp/tensor.hpp"
#include "mcomp/trainer.hpp"
#include "mcomp/unet.hpp"

TEST_CASE("headers compile and basic objects construct", "[smoke]") {
    mcomp::Rng rng(7);
    mcomp::Tensor t({2, 3});
    REQUIRE(t.numel() == 6);
    mcomp::LayoutSpec layout;
    layout.object_boxes.push_back({0.1, 0.1, 0.5, 0.5});
    layout.global_box = mcomp::unit_box();
    REQUIRE(mcomp::validate_layout(layout).ok);
    mcomp::ShapeScene scene = mcomp::make_shape_scene(rng, 32, 2);
    REQUIRE(scene.composed.width == 32);
    REQUIRE(scene.caption.spans.size() == 2);
}
