"""3D nasal-region biometric engine."""
