// Simulates two consecutive scans on the bundled map and matches them.

#include <cstdio>

#include "bpsm/bpsm.hpp"

int main() {
  using namespace bpsm;
  const auto map = load_map(BPSM_DATA_DIR "/demo_map.csv");
  const Pose destination_pose = Pose::from_xy_theta(60.0, 11.0, 0.0);
  const Pose truth = Pose::from_xy_theta(0.8, 0.0, deg2rad(2.0));
  const Pose source_pose = compose(destination_pose, truth);

  const CounterRng rng(42);
  const SensorSpec sensor;
  const ClutterSpec clutter;
  const auto destination = scan(map, destination_pose, sensor, clutter, rng.split("destination"));
  const auto source = scan(map, source_pose, sensor, clutter, rng.split("source"));
  const auto surface = estimate_normals(destination.points);

  const auto result = match_scans(source, surface, InferenceConfig{}, rng.split("match"));
  const auto est = to_chart(result.map_pose);
  std::printf("true      x=%.4f y=%.4f theta=%.3f deg\n", 0.8, 0.0, 2.0);
  std::printf("estimate  x=%.4f y=%.4f theta=%.3f deg\n", est.x, est.y, rad2deg(est.theta));
  std::printf("translation error %.3f%%, BP sweeps %d\n", 100.0 * translation_error(result.map_pose, truth),
              result.diagnostics.bp_iterations);
  return 0;
}
