# Test package for backend services
