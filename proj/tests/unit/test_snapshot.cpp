#include <gtest/gtest.h>

#include <sstream>

#include "cfl/errors.hpp"
#include "cfl/snapshot.hpp"

TEST(Snapshot, BackboneRoundTrip) {
  auto bb = cfl::init_backbone({3, 5, 2}, cfl::Activation::tanh, cfl::Parameterization::ntk, 4);
  std::stringstream ss;
  cfl::save_backbone(ss, bb);
  EXPECT_EQ(cfl::load_backbone(ss), bb);
}

TEST(Snapshot, HeadRoundTrip) {
  auto h = cfl::init_head(2, 3, cfl::InitPolicy::xavier, 9, true, cfl::Regularizer::proximal(0.5));
  std::stringstream ss;
  cfl::save_head(ss, h);
  EXPECT_EQ(cfl::load_head(ss), h);
}

TEST(Snapshot, RejectsCorruptInput) {
  std::stringstream bad("XXXX0000");
  EXPECT_THROW(cfl::load_backbone(bad), cfl::IoError);
  auto bb = cfl::init_backbone({3, 5, 2}, cfl::Activation::relu, cfl::Parameterization::standard, 4);
  std::stringstream ss;
  cfl::save_backbone(ss, bb);
  std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 8));
  EXPECT_THROW(cfl::load_backbone(truncated), cfl::IoError);
  std::stringstream head_as_backbone;
  cfl::save_head(head_as_backbone, cfl::init_head(1, 1, cfl::InitPolicy::zeros, 0));
  EXPECT_THROW(cfl::load_backbone(head_as_backbone), cfl::IoError);
  EXPECT_THROW(cfl::load_head(std::filesystem::path("/nonexistent/h.bin")), cfl::IoError);
}
