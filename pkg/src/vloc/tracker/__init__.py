"""Feature extraction, optical-flow tracking and tracking-set maintenance."""
