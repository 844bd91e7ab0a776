"""Visual-UWB SLAM: map state, estimation stages and the exploration/localization drivers."""
