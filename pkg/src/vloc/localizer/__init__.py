"""Online pose estimation: correspondences, P3P + RANSAC, Kalman filtering and the frame stream."""
