#include <doctest.h>

#include "stagescope/error.hpp"
#include "stagescope/schedule.hpp"

using namespace stagescope;
using Steps = std::vector<int>;

TEST_CASE("identity") {
  CHECK(LayerSchedule::identity(3).steps() == Steps{0, 1, 2});
  CHECK(LayerSchedule::identity(1).steps() == Steps{0});
  CHECK_THROWS_AS(LayerSchedule::identity(0), ValidationError);
}

TEST_CASE("swap") {
  CHECK(LayerSchedule::swap(5, 2).steps() == Steps{0, 1, 3, 2, 4});
  CHECK(LayerSchedule::swap(2, 0).steps() == Steps{1, 0});
  CHECK_THROWS_AS(LayerSchedule::swap(5, 4), ValidationError);
  CHECK_THROWS_AS(LayerSchedule::swap(5, -1), ValidationError);
}

TEST_CASE("drop") {
  CHECK(LayerSchedule::drop(5, 2).steps() == Steps{0, 1, 3, 4});
  CHECK(LayerSchedule::drop(1, 0).steps().empty());
  CHECK_THROWS_AS(LayerSchedule::drop(5, 5), ValidationError);
}

TEST_CASE("repeat") {
  CHECK(LayerSchedule::repeat(10, 4, 3, 1).steps() == Steps{0, 1, 2, 3, 4, 4, 5, 5, 6, 6, 7, 8, 9});
  CHECK(LayerSchedule::repeat(6, 1, 2, 0).steps() == LayerSchedule::identity(6).steps());
  CHECK(LayerSchedule::repeat(4, 0, 2, 2).steps() == Steps{0, 0, 0, 1, 1, 1, 2, 3});
  CHECK_THROWS_AS(LayerSchedule::repeat(5, 3, 3, 1), ValidationError);
  CHECK_THROWS_AS(LayerSchedule::repeat(5, 0, 2, -1), ValidationError);
}

TEST_CASE("sizes") {
  for (int L = 1; L <= 12; ++L) {
    CHECK(LayerSchedule::identity(L).size() == std::size_t(L));
    for (int l = 0; l < L; ++l) CHECK(LayerSchedule::drop(L, l).size() == std::size_t(L - 1));
    for (int len = 1; len <= L; ++len)
      for (int times = 0; times < 3; ++times)
        CHECK(LayerSchedule::repeat(L, L - len, len, times).size() == std::size_t(L + len * times));
  }
}

TEST_CASE("swap ablation baseline equals plain drop") {
  for (int L = 2; L <= 12; ++L) {
    for (int l = 0; l + 1 < L; ++l) {
      // Remove the block the swap moved later (block l) from the swapped order.
      Steps swapped = LayerSchedule::swap(L, l).steps();
      std::erase(swapped, l);
      CHECK(swapped == LayerSchedule::drop(L, l).steps());
      CHECK(LayerSchedule::swap_drop_baseline(L, l).steps() == swapped);
    }
  }
}

TEST_CASE("swap differs from identity by one adjacent transposition") {
  for (int l = 0; l < 6; ++l) {
    const auto s = LayerSchedule::swap(7, l).steps();
    int diffs = 0;
    for (int i = 0; i < 7; ++i) diffs += s[i] != i;
    CHECK(diffs == 2);
    CHECK(s[l] == l + 1);
    CHECK(s[l + 1] == l);
  }
}

TEST_CASE("notation roundtrip") {
  for (const char* n : {"identity", "drop:3", "swap:3", "repeat:1+3x1", "custom:0,1,3,2,4", "custom:"}) {
    const auto s = LayerSchedule::parse(n, 5);
    CHECK(s.notation() == n);
    CHECK(LayerSchedule::parse(s.notation(), 5) == s);
  }
  CHECK(LayerSchedule::parse("swap:3", 5).steps() == Steps{0, 1, 2, 4, 3});
  CHECK(LayerSchedule::parse("swap:3", 5).kind() == ScheduleKind::swap);
  CHECK(*LayerSchedule::parse("drop:2", 5).params().layer == 2);
  CHECK_THROWS_AS(LayerSchedule::parse("drop:9", 5), ValidationError);
  CHECK_THROWS_AS(LayerSchedule::parse("shuffle", 5), ValidationError);
  CHECK_THROWS_AS(LayerSchedule::parse("drop:x", 5), ValidationError);
  CHECK_THROWS_AS(LayerSchedule::parse("custom:0,7", 5), ValidationError);
}

TEST_CASE("validation and shared prefix") {
  const auto id = LayerSchedule::identity(5);
  CHECK_NOTHROW(id.validate(5));
  CHECK_THROWS_AS(id.validate(4), ValidationError);
  CHECK(LayerSchedule::swap(5, 2).common_prefix(id) == 2);
  CHECK(LayerSchedule::drop(5, 0).common_prefix(id) == 0);
  CHECK(LayerSchedule::drop(5, 4).common_prefix(id) == 4);
  CHECK(id.common_prefix(id) == 5);
}
